//! Randomized gradient checks for every op kind on the tape.
//!
//! Each case draws an input for one seed and wraps the op under test in a
//! random bilinear read-out `u^T op(x) v`, so every output coordinate reaches
//! the scalar with a generic weight. Relu inputs are kept at least 0.1 away
//! from the kink.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{grad_check, NodeId, Tape, Tensor};
use crate::error::Result;

/// Step and tolerance used throughout the catalog.
pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub case: &'static str,
    pub seeds: usize,
    pub failures: usize,
    pub max_rel_error: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

type Builder = fn(&mut Tape, NodeId, &Fixture) -> Result<NodeId>;

/// Per-seed constants shared by the op under test and its read-out.
pub struct Fixture {
    rng_consts: Vec<Tensor>,
    ids: Vec<usize>,
    targets: Vec<usize>,
    binary: Vec<f64>,
    mask: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let v = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(rows, cols, v).expect("shape")
}

/// Away from zero by at least 0.1, random sign.
fn off_kink(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let v = (0..rows * cols)
        .map(|_| {
            let mag = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(rows, cols, v).expect("shape")
}

fn readout(tape: &mut Tape, out: NodeId, fx: &Fixture) -> Result<NodeId> {
    let [r, c] = tape.value(out).shape();
    // Read-out weights are the last two constants, sized generously and cut.
    let u_src = &fx.rng_consts[fx.rng_consts.len() - 2];
    let v_src = &fx.rng_consts[fx.rng_consts.len() - 1];
    let u = tape.constant(Tensor::row(u_src.values()[..r].to_vec()));
    let v = tape.constant(Tensor::column(v_src.values()[..c].to_vec()));
    let left = tape.matmul(u, out)?;
    tape.matmul(left, v)
}

struct Case {
    name: &'static str,
    input: fn(&mut ChaCha8Rng) -> Tensor,
    build: Builder,
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul/left",
            input: |r| uniform(r, 3, 4, -1.0, 1.0),
            build: |t, x, fx| {
                let b = t.constant(fx.rng_consts[0].clone());
                let y = t.matmul(x, b)?;
                readout(t, y, fx)
            },
        },
        Case {
            name: "matmul/right",
            input: |r| uniform(r, 4, 2, -1.0, 1.0),
            build: |t, x, fx| {
                let a = t.constant(fx.rng_consts[1].clone());
                let y = t.matmul(a, x)?;
                readout(t, y, fx)
            },
        },
        Case {
            name: "matmul/transposed-left",
            input: |r| uniform(r, 4, 3, -1.0, 1.0),
            build: |t, x, fx| {
                let b = t.constant(fx.rng_consts[0].clone());
                let y = t.matmul_tn(x, b)?;
                readout(t, y, fx)
            },
        },
        Case {
            name: "matmul/transposed-right",
            input: |r| uniform(r, 2, 4, -1.0, 1.0),
            build: |t, x, fx| {
                // x x^T exercises both operand paths on one leaf.
                let y = t.matmul_nt(x, x)?;
                readout(t, y, fx)
            },
        },
        Case {
            name: "add/same-shape",
            input: |r| uniform(r, 3, 4, -1.0, 1.0),
            build: |t, x, fx| {
                let b = t.constant(fx.rng_consts[2].clone());
                let y = t.add(x, b)?;
                let y = t.add(y, x)?;
                readout(t, y, fx)
            },
        },
        Case {
            name: "add/row-broadcast",
            input: |r| uniform(r, 1, 4, -1.0, 1.0),
            build: |t, x, fx| {
                let a = t.constant(fx.rng_consts[2].clone());
                let y = t.add(a, x)?;
                readout(t, y, fx)
            },
        },
        Case {
            name: "mul-scalar",
            input: |r| uniform(r, 3, 2, -1.0, 1.0),
            build: |t, x, fx| {
                let y = t.mul_scalar(x, -1.7)?;
                readout(t, y, fx)
            },
        },
        Case {
            name: "embedding-lookup",
            input: |r| uniform(r, 6, 3, -1.0, 1.0),
            build: |t, x, fx| {
                let y = t.embedding(x, &fx.ids)?;
                readout(t, y, fx)
            },
        },
        Case {
            name: "mean-pool-masked/rows",
            input: |r| uniform(r, 5, 3, -1.0, 1.0),
            build: |t, x, fx| {
                let m = t.constant(Tensor::column(fx.binary[..5].to_vec()));
                let y = t.mean_pool_masked(x, m)?;
                readout(t, y, fx)
            },
        },
        Case {
            name: "mean-pool-masked/weights",
            input: |r| uniform(r, 5, 1, 0.2, 0.9),
            build: |t, w, fx| {
                let x = t.constant(fx.rng_consts[3].clone());
                let y = t.mean_pool_masked(x, w)?;
                readout(t, y, fx)
            },
        },
        Case {
            name: "row-softmax",
            input: |r| uniform(r, 3, 4, -2.0, 2.0),
            build: |t, x, fx| {
                let y = t.row_softmax(x)?;
                readout(t, y, fx)
            },
        },
        Case {
            name: "sigmoid",
            input: |r| uniform(r, 3, 3, -3.0, 3.0),
            build: |t, x, fx| {
                let y = t.sigmoid(x)?;
                readout(t, y, fx)
            },
        },
        Case {
            name: "relu",
            input: |r| off_kink(r, 3, 4),
            build: |t, x, fx| {
                let y = t.relu(x)?;
                readout(t, y, fx)
            },
        },
        Case {
            name: "concat-rows",
            input: |r| uniform(r, 2, 4, -1.0, 1.0),
            build: |t, x, fx| {
                let c = t.constant(fx.rng_consts[2].clone());
                let y = t.concat_rows(&[x, c, x])?;
                readout(t, y, fx)
            },
        },
        Case {
            name: "select-rows",
            input: |r| uniform(r, 4, 3, -1.0, 1.0),
            build: |t, x, fx| {
                let y = t.select_rows(x, &[2, 0, 2])?;
                readout(t, y, fx)
            },
        },
        Case {
            name: "softmax-cross-entropy",
            input: |r| uniform(r, 4, 3, -2.0, 2.0),
            build: |t, x, fx| t.softmax_cross_entropy(x, &fx.targets),
        },
        Case {
            name: "binary-cross-entropy-masked",
            input: |r| uniform(r, 6, 1, -4.0, 4.0),
            build: |t, x, fx| t.binary_cross_entropy_masked(x, &fx.binary, &fx.mask, false),
        },
        Case {
            name: "binary-cross-entropy-masked/one-sided",
            input: |r| uniform(r, 6, 1, -4.0, 4.0),
            build: |t, x, fx| t.binary_cross_entropy_masked(x, &fx.binary, &fx.mask, true),
        },
    ]
}

impl Fixture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let rng_consts = vec![
            uniform(rng, 4, 2, -1.0, 1.0),
            uniform(rng, 3, 4, -1.0, 1.0),
            uniform(rng, 3, 4, -1.0, 1.0),
            uniform(rng, 5, 3, -1.0, 1.0),
            uniform(rng, 1, 8, -1.0, 1.0),
            uniform(rng, 8, 1, -1.0, 1.0),
        ];
        let ids = (0..5).map(|_| rng.random_range(0..6)).collect();
        let targets = (0..4).map(|_| rng.random_range(0..3)).collect();
        let mut binary: Vec<f64> = (0..6).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect();
        binary[rng.random_range(0..5)] = 1.0;
        let mut mask: Vec<f64> = (0..6).map(|_| f64::from(rng.random_bool(0.7) as u8)).collect();
        mask[rng.random_range(0..6)] = 1.0;
        Self {
            rng_consts,
            ids,
            targets,
            binary,
            mask,
        }
    }
}

/// Runs every case for `seeds` seeds starting at `first_seed`.
pub fn run(first_seed: u64, seeds: usize) -> Result<Vec<CaseResult>> {
    let mut results = Vec::new();
    for case in cases() {
        let mut failures = 0;
        let mut worst: f64 = 0.0;
        for s in 0..seeds as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(first_seed.wrapping_add(s));
            let fx = Fixture::new(&mut rng);
            let x = (case.input)(&mut rng);
            let build = case.build;
            let report = grad_check(|t, leaf| build(t, leaf, &fx), &x, STEP, TOLERANCE)?;
            worst = worst.max(report.max_rel_error);
            if !report.passed {
                failures += 1;
            }
        }
        results.push(CaseResult {
            case: case.name,
            seeds,
            failures,
            max_rel_error: worst,
        });
    }
    Ok(results)
}

/// Op kinds the catalog covers, by case-name prefix.
pub fn covered_kinds() -> Vec<&'static str> {
    let mut kinds: Vec<&'static str> = cases()
        .iter()
        .map(|c| c.name.split('/').next().unwrap_or(c.name))
        .collect();
    kinds.dedup();
    kinds
}
