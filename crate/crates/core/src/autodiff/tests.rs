use super::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn matmul_by_identity() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let i = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let y = t.matmul(a, i).unwrap();
    assert_eq!(t.value(y), &Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
}

#[test]
fn sigmoid_at_zero() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::column(vec![0.0]));
    let y = t.sigmoid(x).unwrap();
    assert_eq!(t.value(y).values(), &[0.5]);
}

#[test]
fn uniform_logits_cross_entropy_is_ln_classes() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::row(vec![0.0, 0.0, 0.0]));
    let y = t.softmax_cross_entropy(x, &[1]).unwrap();
    assert!(close(t.value(y).item().unwrap(), 3f64.ln(), 1e-15));
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::column(vec![1.0, 2.0, 3.0]));
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(t.value(s).item().unwrap(), 6.0);
    assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    assert_eq!(g.get(s).unwrap(), &[1.0]);
}

#[test]
fn softmax_cross_entropy_gradient_closed_form() {
    let logits = [1.0, 2.0, 3.0];
    // Oracle: softmax(logits) - onehot(2).
    let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
    let expected: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, v)| v.exp() / z - if j == 2 { 1.0 } else { 0.0 })
        .collect();
    let mut t = Tape::new();
    let x = t.leaf(Tensor::row(logits.to_vec()));
    let y = t.softmax_cross_entropy(x, &[2]).unwrap();
    let g = t.backward(y).unwrap();
    let got = g.get(x).unwrap();
    for (a, b) in got.iter().zip(&expected) {
        assert!(close(*a, *b, 1e-15));
    }
    let frozen = [0.0900, 0.2447, -0.3348];
    for (a, b) in got.iter().zip(&frozen) {
        assert!(close(*a, *b, 5e-5), "{got:?}");
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::column(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
}

#[test]
fn unreachable_leaves_get_zero_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::column(vec![1.0, 2.0]));
    let unused = t.leaf(Tensor::column(vec![5.0, 6.0, 7.0]));
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(unused).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn constants_have_no_gradient() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::column(vec![1.0]));
    let x = t.leaf(Tensor::column(vec![2.0]));
    let y = t.matmul_tn(c, x).unwrap();
    let g = t.backward(y).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap(), &[1.0]);
}

#[test]
fn shape_mismatch_is_contract_violation() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(2, 3));
    let b = t.leaf(Tensor::zeros(2, 3));
    assert!(matches!(t.matmul(a, b), Err(Error::Contract(_))));
    let c = t.leaf(Tensor::zeros(3, 2));
    assert!(matches!(t.add(a, c), Err(Error::Contract(_))));
    assert!(matches!(
        t.softmax_cross_entropy(a, &[0, 3]),
        Err(Error::Contract(_))
    ));
    assert!(matches!(t.embedding(a, &[2]), Err(Error::Contract(_))));
}

#[test]
fn empty_pool_mask_is_degenerate() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(3, 2));
    let m = t.constant(Tensor::column(vec![0.0, 0.0, 0.0]));
    assert!(matches!(t.mean_pool_masked(x, m), Err(Error::Degenerate(_))));
}

#[test]
fn mean_pool_averages_only_masked_rows() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_rows(&[&[1.0, 10.0], &[3.0, 30.0], &[100.0, 100.0]]));
    let m = t.constant(Tensor::column(vec![1.0, 1.0, 0.0]));
    let y = t.mean_pool_masked(x, m).unwrap();
    assert_eq!(t.value(y).values(), &[2.0, 20.0]);
}

#[test]
fn bce_perfect_and_uncertain_predictions() {
    let mut t = Tape::new();
    let s = t.leaf(Tensor::column(vec![0.0, 0.0, 0.0]));
    let y = t
        .binary_cross_entropy_masked(s, &[1.0, 0.0, 1.0], &[1.0, 1.0, 1.0], false)
        .unwrap();
    assert!(close(t.value(y).item().unwrap(), 2f64.ln(), 1e-12));

    let s = t.leaf(Tensor::column(vec![50.0, -50.0]));
    let y = t
        .binary_cross_entropy_masked(s, &[1.0, 0.0], &[1.0, 1.0], false)
        .unwrap();
    // Clamped at 1e-7 on both sides.
    assert!(t.value(y).item().unwrap() < 2e-7);
}

#[test]
fn bce_rejects_empty_mask() {
    let mut t = Tape::new();
    let s = t.leaf(Tensor::column(vec![0.3, 0.1]));
    assert!(matches!(
        t.binary_cross_entropy_masked(s, &[1.0, 0.0], &[0.0, 0.0], false),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn relu_gradient_at_zero_is_zero() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::column(vec![0.0, 1.0, -1.0]));
    let y = t.relu(x).unwrap();
    let s = t.sum(y).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[0.0, 1.0, 0.0]);
}

#[test]
fn squared_scalar_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0));
    let y = t.matmul(x, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[6.0]);
}

#[test]
fn grad_check_examples() {
    let sumsq = |t: &mut Tape, x: NodeId| t.matmul_tn(x, x);
    let r = grad_check(sumsq, &Tensor::column(vec![1.0, -2.0]), 1e-5, 1e-4).unwrap();
    assert!(r.passed);
    assert!(close(r.analytic[0], 2.0, 1e-12) && close(r.analytic[1], -4.0, 1e-12));

    let constant = |t: &mut Tape, _x: NodeId| Ok(t.constant(Tensor::scalar(4.2)));
    let r = grad_check(constant, &Tensor::column(vec![1.0, 2.0]), 1e-5, 1e-4).unwrap();
    assert!(r.passed);
    assert_eq!(r.analytic, vec![0.0, 0.0]);
    assert_eq!(r.numeric, vec![0.0, 0.0]);
}

#[test]
fn grad_check_rejects_bad_step_and_nonfinite() {
    let f = |t: &mut Tape, x: NodeId| t.matmul_tn(x, x);
    assert!(grad_check(f, &Tensor::scalar(1.0), 1e-2, 1e-4).is_err());
    let blowup = |t: &mut Tape, x: NodeId| {
        let big = t.mul_scalar(x, 1e308)?;
        t.matmul_tn(big, big)
    };
    assert!(matches!(
        grad_check(blowup, &Tensor::scalar(10.0), 1e-5, 1e-4),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn every_op_kind_passes_grad_check_over_100_seeds() {
    let results = catalog::run(0, 100).unwrap();
    for r in &results {
        assert!(r.passed(), "{r:?}");
        assert!(r.max_rel_error <= catalog::TOLERANCE);
    }
    let kinds = catalog::covered_kinds();
    for k in [
        "matmul",
        "add",
        "mul-scalar",
        "embedding-lookup",
        "mean-pool-masked",
        "row-softmax",
        "sigmoid",
        "relu",
        "concat-rows",
        "select-rows",
        "softmax-cross-entropy",
        "binary-cross-entropy-masked",
    ] {
        assert!(kinds.contains(&k), "missing {k}");
    }
}

fn small_graph(t: &mut Tape, x: NodeId, w: NodeId) -> (NodeId, NodeId) {
    let h = t.matmul(x, w).unwrap();
    let h = t.relu(h).unwrap();
    let l1 = t.softmax_cross_entropy(h, &[1, 0]).unwrap();
    let p = t.row_softmax(h).unwrap();
    let l2 = t.sum(p).unwrap();
    let l2 = t.mul_scalar(l2, 0.3).unwrap();
    (l1, l2)
}

#[test]
fn backward_is_linear_in_the_loss() {
    let xs = Tensor::from_rows(&[&[0.3, -1.2, 0.8], &[1.1, 0.4, -0.6]]);
    let ws = Tensor::from_rows(&[&[0.5, -0.2], &[0.7, 0.9], &[-0.4, 0.3]]);
    let mut t = Tape::new();
    let x = t.leaf(xs);
    let w = t.leaf(ws);
    let (l1, l2) = small_graph(&mut t, x, w);
    let total = t.add(l1, l2).unwrap();
    let g_total = t.backward(total).unwrap();
    let mut g_sum = t.backward(l1).unwrap();
    g_sum.accumulate(&t.backward(l2).unwrap());
    for id in [x, w] {
        for (a, b) in g_total.get(id).unwrap().iter().zip(g_sum.get(id).unwrap()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300));
        }
    }
}

#[test]
fn replay_is_bitwise_identical() {
    let build = || {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[&[0.3, -1.2, 0.8], &[1.1, 0.4, -0.6]]));
        let w = t.leaf(Tensor::from_rows(&[&[0.5, -0.2], &[0.7, 0.9], &[-0.4, 0.3]]));
        let (l1, l2) = small_graph(&mut t, x, w);
        let total = t.add(l1, l2).unwrap();
        let g = t.backward(total).unwrap();
        (t.value(total).clone(), g.get(w).unwrap().to_vec())
    };
    let (a, ga) = build();
    let (b, gb) = build();
    assert_eq!(a.values()[0].to_bits(), b.values()[0].to_bits());
    assert_eq!(ga, gb);
}

#[test]
fn tape_is_topologically_ordered() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_rows(&[&[0.3, -1.2, 0.8], &[1.1, 0.4, -0.6]]));
    let w = t.leaf(Tensor::from_rows(&[&[0.5, -0.2], &[0.7, 0.9], &[-0.4, 0.3]]));
    let (l1, l2) = small_graph(&mut t, x, w);
    let total = t.add(l1, l2).unwrap();
    for i in 0..=total.index() {
        let id = NodeId(i);
        assert!(t.inputs(id).iter().all(|inp| inp.index() < i));
    }
    assert_eq!(t.kind(total), OpKind::Add);
}

#[test]
fn seeded_backward_matches_scalar_backward() {
    // Seeding a vector node with v equals backward of v . node.
    let mut t = Tape::new();
    let x = t.leaf(Tensor::column(vec![0.2, -0.4, 0.9]));
    let s = t.sigmoid(x).unwrap();
    let v = t.constant(Tensor::column(vec![1.5, -2.0, 0.5]));
    let dot = t.matmul_tn(v, s).unwrap();
    let a = t.backward(dot).unwrap();
    let b = t.backward_from(&[(s, vec![1.5, -2.0, 0.5])]).unwrap();
    assert_eq!(a.get(x), b.get(x));
}
