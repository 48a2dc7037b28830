use super::*;
use crate::autodiff::Tensor;
use crate::data::{generate_synthetic, SyntheticSpec};
use crate::metrics;
use crate::models::{EncoderKind, Role, Variant};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        vocab_size: 60,
        seq_len: [8, 12],
        rationale_len: [2, 3],
        signal_pool_size: 6,
        num_train: 48,
        num_dev: 24,
        ..SyntheticSpec::default()
    }
}

fn small_cfg(seed: u64) -> TrainConfig {
    let spec = small_spec();
    TrainConfig {
        seed,
        model: ModelConfig {
            vocab_size: spec.vocab_size,
            embed_dim: 8,
            hidden_dim: 12,
            max_len: 16,
            ..ModelConfig::default()
        },
        train: TrainSettings {
            batch_size: 8,
            max_epochs: 2,
            patience: 2,
        },
        ..TrainConfig::default()
    }
}

fn splits(seed: u64) -> (Dataset, Dataset) {
    data::synthetic_splits(&small_spec(), seed).unwrap()
}

fn extractor_delta(before: &ModelParams, after: &ModelParams) -> f64 {
    before
        .role_indices(Role::Extractor)
        .into_iter()
        .map(|i| {
            before.tensors[i]
                .value
                .values()
                .iter()
                .zip(after.tensors[i].value.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Plain task cross-entropy step, built without any of the rationale machinery.
fn plain_ce_step(params: &ModelParams, batch: &[&Example], optim: AdamConfig) -> ModelParams {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let logits: Vec<_> = batch
        .iter()
        .map(|ex| bound.task_logits(&mut tape, &ex.tokens, &vec![1.0; ex.len()]).unwrap())
        .collect();
    let z = tape.concat_rows(&logits).unwrap();
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let loss = tape.softmax_cross_entropy(z, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    let zero: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.value.values().len()]).collect();
    let grad_refs: Vec<&[f64]> = bound
        .ids
        .iter()
        .zip(&zero)
        .map(|(&id, z)| grads.get(id).unwrap_or(z))
        .collect();
    let mut out = params.clone();
    let mut adam = Adam::new(optim, params.tensors.iter().map(|t| &t.value));
    let mut tensors: Vec<&mut Tensor> = out.tensors.iter_mut().map(|t| &mut t.value).collect();
    adam.step(&mut tensors, &grad_refs).unwrap();
    out
}

#[test]
fn zero_weights_match_plain_classifier_step() {
    let (train, _) = splits(3);
    let batch: Vec<&Example> = train.examples[..8].iter().collect();
    for variant in [Variant::Dual, Variant::Shared] {
        let mut cfg = small_cfg(3);
        cfg.model.variant = variant;
        cfg.weights.set_alpha_f(0.0);
        cfg.weights.alpha_p = 0.0;
        let params = ModelParams::init(&cfg.model, 3).unwrap();
        let (ours, _) = train_step(&params, &batch, &cfg).unwrap();
        let plain = plain_ce_step(&params, &batch, cfg.optim);
        assert_eq!(ours, plain, "{variant:?}");
    }
}

#[test]
fn plausibility_weight_moves_extractor() {
    let (train, _) = splits(4);
    let batch: Vec<&Example> = train.examples[..8].iter().collect();
    let mut cfg = small_cfg(4);
    cfg.weights.set_alpha_f(0.0);
    cfg.weights.alpha_p = 1.0;
    let params = ModelParams::init(&cfg.model, 4).unwrap();
    let (after, _) = train_step(&params, &batch, &cfg).unwrap();
    assert!(extractor_delta(&params, &after) > 0.0);
}

#[test]
fn faithfulness_reaches_extractor_only_through_estimator() {
    let (train, _) = splits(5);
    let batch: Vec<&Example> = train.examples[..8].iter().collect();
    let mut cfg = small_cfg(5);
    cfg.weights.set_alpha_f(1.0);
    cfg.weights.alpha_p = 0.0;
    cfg.aimle.enabled = false;
    let params = ModelParams::init(&cfg.model, 5).unwrap();

    cfg.imle.lambda = 0.0;
    let (frozen, _) = train_step(&params, &batch, &cfg).unwrap();
    assert_eq!(extractor_delta(&params, &frozen), 0.0);

    cfg.imle.lambda = 100.0;
    let (moved, report) = train_step(&params, &batch, &cfg).unwrap();
    assert!(report.diff_rate > 0.0);
    assert!(extractor_delta(&params, &moved) > 0.0);
}

#[test]
fn first_pass_leaves_extractor_without_gradient() {
    let (train, _) = splits(6);
    let batch: Vec<&Example> = train.examples[..4].iter().collect();
    let mut cfg = small_cfg(6);
    cfg.weights.alpha_p = 0.0;
    let params = ModelParams::init(&cfg.model, 6).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let g = graph::build(&mut tape, &bound, &batch, &cfg.weights, None).unwrap();
    let grads = tape.backward(g.total).unwrap();
    for i in params.role_indices(Role::Extractor) {
        let nonzero = grads.get(bound.ids[i]).is_some_and(|v| v.iter().any(|&x| x != 0.0));
        assert!(!nonzero, "{}", params.tensors[i].name);
    }
    let any_r = g
        .selections
        .iter()
        .any(|s| grads.get(s.r).is_some_and(|v| v.iter().any(|&x| x != 0.0)));
    assert!(any_r);
}

#[test]
fn patience_one_stops_after_first_rise() {
    let mut s = EarlyStopping::new(1);
    assert_eq!(s.observe(1, 0.5), (true, false));
    assert_eq!(s.observe(2, 0.7), (false, true));
    assert_eq!(s.best_epoch, Some(1));

    let mut s = EarlyStopping::new(3);
    for (e, v) in [(1, 1.0), (2, 0.9), (3, 0.95), (4, 0.95)] {
        assert!(!s.observe(e, v).1);
    }
    assert_eq!(s.observe(5, 0.91), (false, true));
    assert_eq!(s.best_epoch, Some(2));
}

#[test]
fn best_epoch_minimizes_dev_loss() {
    let (train, dev) = splits(7);
    let out = run_training(&small_cfg(7), &train, &dev, None).unwrap();
    let log = &out.log;
    let best = log.best().dev_loss.total;
    assert!(log.epochs.iter().all(|e| e.dev_loss.total >= best));
    let again = evaluate_model(&out.params, &dev, &log.config.eval, None).unwrap();
    assert_eq!(&again, &log.best().dev);
}

#[test]
fn training_is_deterministic() {
    let (train, dev) = splits(8);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let cfg = small_cfg(8);
    let x = run_training(&cfg, &train, &dev, Some(&a)).unwrap();
    let y = run_training(&cfg, &train, &dev, Some(&b)).unwrap();
    assert_eq!(x.params, y.params);
    assert_eq!(x.log.without_timing(), y.log.without_timing());
    assert_eq!(
        std::fs::read(a.join("best.json")).unwrap(),
        std::fs::read(b.join("best.json")).unwrap()
    );
}

#[test]
fn untrained_model_is_at_chance() {
    let spec = SyntheticSpec {
        num_train: 0,
        num_dev: 2000,
        ..SyntheticSpec::default()
    };
    let dev = generate_synthetic(&spec, 11).unwrap();
    let mut accs = Vec::new();
    for seed in 0..5 {
        let params = ModelParams::init(&ModelConfig::default(), seed).unwrap();
        let r = evaluate_model(&params, &dev, &EvalConfig::default(), None).unwrap();
        accs.push(r.accuracy.unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.05, "{accs:?}");
}

#[test]
fn full_rationale_has_zero_sufficiency() {
    let (_, dev) = splits(9);
    for encoder in [EncoderKind::MeanPoolMlp, EncoderKind::SingleHeadAttention] {
        let mut cfg = small_cfg(9);
        cfg.model.encoder = encoder;
        let params = ModelParams::init(&cfg.model, 9).unwrap();
        let eval = EvalConfig {
            aopc_bins: vec![KPercent::new(100.0).unwrap()],
            ..EvalConfig::default()
        };
        let r = evaluate_model(&params, &dev, &eval, None).unwrap();
        assert_eq!(r.suff_aopc, 0.0, "{encoder:?}");
    }
}

#[test]
fn gold_free_evaluation_omits_plausibility() {
    let (_, dev) = splits(10);
    let params = ModelParams::init(&small_cfg(10).model, 10).unwrap();
    let r = evaluate_model(&params, &dev.without_gold(), &EvalConfig::default(), None).unwrap();
    assert!(r.tf1.is_none() && r.auprc.is_none() && r.iou_f1.is_none());
    assert!(r.accuracy.is_some() && r.macro_f1.is_some());
    assert!(r.suff_aopc.is_finite() && r.comp_aopc.is_finite());
}

#[test]
fn strata_equal_reports_on_filtered_records() {
    let (_, dev) = splits(12);
    let params = ModelParams::init(&small_cfg(12).model, 12).unwrap();
    let eval = EvalConfig::default();
    let records = evaluate_records(&params, &dev, &eval).unwrap();
    let r = evaluate_model(&params, &dev, &eval, None).unwrap();
    let strata = r.stratified.as_ref().unwrap();
    let correct: Vec<_> = records.iter().filter(|x| x.pred == x.label).cloned().collect();
    let wrong: Vec<_> = records.iter().filter(|x| x.pred != x.label).cloned().collect();
    assert!(!correct.is_empty() && !wrong.is_empty());
    let want = metrics::report(&correct, 2, eval.averaging, false).unwrap();
    assert_eq!(strata.correct.as_deref(), Some(&want));
    let want = metrics::report(&wrong, 2, eval.averaging, false).unwrap();
    assert_eq!(strata.incorrect.as_deref(), Some(&want));
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    for encoder in [EncoderKind::MeanPoolMlp, EncoderKind::SingleHeadAttention] {
        for variant in [Variant::Dual, Variant::Shared] {
            for check in crate::diagnostics::full_loss(1, encoder, variant, 1e-5, 1e-4).unwrap() {
                assert!(check.passed, "{check:?}");
            }
        }
    }
}

fn tiny_sweep_cfg() -> TrainConfig {
    let mut cfg = small_cfg(2);
    cfg.train.max_epochs = 1;
    cfg
}

#[test]
fn sweep_axes_have_expected_row_counts() {
    let (train, dev) = splits(2);
    let base = tiny_sweep_cfg();
    let grid = run_sweep(&base, &Axis::weight_grid(), &train, &dev, 4).unwrap();
    assert_eq!(grid.len(), 9);
    let pairs: Vec<(f64, f64)> = grid.iter().map(|r| (r.alpha_c, r.alpha_p)).collect();
    assert_eq!(pairs[0], (0.0, 0.0));
    assert_eq!(pairs[5], (0.5, 1.0));
    assert!(grid.iter().all(|r| r.alpha_c == r.alpha_s));

    let fr = run_sweep(&base, &Axis::annotation_fraction(), &train, &dev, 4).unwrap();
    let fracs: Vec<f64> = fr.iter().map(|r| r.gold_fraction).collect();
    assert_eq!(fracs, ANNOTATION_FRACTIONS.to_vec());

    let tk = run_sweep(&base, &Axis::topk_transfer(), &train, &dev, 2).unwrap();
    let ks: Vec<f64> = tk.iter().map(|r| r.eval_k.get()).collect();
    assert_eq!(ks, TRANSFER_KS.to_vec());
    assert!(tk.iter().all(|r| r.best_epoch == tk[0].best_epoch));
}

#[test]
fn sweep_is_independent_of_job_count() {
    let (train, dev) = splits(2);
    let base = tiny_sweep_cfg();
    let one = run_sweep(&base, &Axis::annotation_fraction(), &train, &dev, 1).unwrap();
    let many = run_sweep(&base, &Axis::annotation_fraction(), &train, &dev, 6).unwrap();
    assert_eq!(one, many);
    let mut csv = Vec::new();
    write_csv(&one, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(text.lines().count(), 7);
    assert!(text.ends_with('\n'));
}

#[test]
fn empty_axis_is_rejected() {
    let (train, dev) = splits(2);
    let axis = Axis::AnnotationFraction { values: vec![] };
    assert!(run_sweep(&tiny_sweep_cfg(), &axis, &train, &dev, 1).is_err());
}

#[test]
fn invalid_settings_are_rejected() {
    let mut cfg = TrainConfig::default();
    cfg.train.batch_size = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = TrainConfig::default();
    cfg.optim.lr = 0.0;
    assert!(cfg.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
}
