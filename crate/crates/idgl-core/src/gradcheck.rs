//! Finite-difference verification of the backward pass.
//!
//! Every differentiable operation gets a small randomized test case; the
//! analytic gradient from one `backward` sweep is compared entrywise against
//! central finite differences of the recomputed loss. The module is part of
//! the library (not test-only) because the `gradcheck` CLI command runs the
//! same suite, including a fault-injection mode that deliberately corrupts
//! one backward rule to prove the checker can catch it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BitMask, OpKind, Tape, Var};
use crate::error::Result;
use crate::linalg::{CsrSparse, Dense};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative-error floor: below this magnitude the comparison is effectively
/// absolute, keeping near-zero gradients from blowing up the ratio with
/// finite-difference roundoff.
pub const REL_FLOOR: f64 = 1e-4;

/// Builds a scalar loss from leaf variables. Must be deterministic: the
/// checker re-invokes it on perturbed inputs.
pub type BuildFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Outcome of one gradient comparison.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<22} max_rel_err={:.3e} tol={:.0e}",
            if self.passed() { "pass" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tol
        )
    }
}

fn eval_loss(params: &[Dense], build: &BuildFn) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), false)).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.value(loss)[(0, 0)])
}

/// Max relative error between analytic and finite-difference gradients over
/// every entry of every parameter. `fault` feeds the tape's fault-injection
/// hook on the analytic pass only.
pub fn compare_gradients(
    params: &[Dense],
    build: &BuildFn,
    fault: Option<(OpKind, f64)>,
) -> Result<f64> {
    let mut tape = Tape::new();
    if let Some((kind, factor)) = fault {
        tape.inject_fault(kind, factor);
    }
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let grads: Vec<Dense> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Dense::zeros(v.rows(), v.cols()))
        })
        .collect();

    let mut work: Vec<Dense> = params.to_vec();
    let mut worst = 0.0_f64;
    for (pi, g) in grads.iter().enumerate() {
        for idx in 0..g.len() {
            let orig = work[pi].as_slice()[idx];
            work[pi].as_mut_slice()[idx] = orig + FD_STEP;
            let lp = eval_loss(&work, build)?;
            work[pi].as_mut_slice()[idx] = orig - FD_STEP;
            let lm = eval_loss(&work, build)?;
            work[pi].as_mut_slice()[idx] = orig;
            let fd = (lp - lm) / (2.0 * FD_STEP);
            let ana = g.as_slice()[idx];
            let err = (ana - fd).abs() / ana.abs().max(fd.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn rand_dense(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Dense {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Dense::from_vec(rows, cols, data).expect("length matches")
}

/// Inputs away from the ReLU kink so the finite difference stays one-sided.
fn rand_dense_no_kink(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Dense {
    let data = (0..rows * cols)
        .map(|_| {
            let x: f64 = rng.gen_range(-1.0..1.0);
            x + 0.15 * x.signum()
        })
        .collect();
    Dense::from_vec(rows, cols, data).expect("length matches")
}

fn rand_csr(rows: usize, cols: usize, density: f64, rng: &mut ChaCha8Rng) -> CsrSparse {
    let mut triplets = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            if rng.gen::<f64>() < density {
                triplets.push((i, j, rng.gen_range(0.2..1.0)));
            }
        }
    }
    CsrSparse::from_triplets(rows, cols, triplets).expect("valid triplets")
}

/// Appends `sum(y ⊙ K)` so each output entry is weighted differently; this
/// catches transposition mistakes a plain sum would miss.
fn weighted_sum(tape: &mut Tape, y: Var, k: &Dense) -> Result<Var> {
    let kid = tape.register_const(k.clone());
    let weighted = tape.mul_const(y, kid)?;
    tape.sum(weighted)
}

struct Case<'a> {
    name: &'static str,
    params: Vec<Dense>,
    build: Box<BuildFn<'a>>,
}

fn suite_cases(seed: u64) -> Vec<Case<'static>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(17));
    let mut cases: Vec<Case<'static>> = Vec::new();

    {
        let k = rand_dense(4, 3, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "add",
            params: vec![rand_dense(4, 3, -1.0, 1.0, &mut rng), rand_dense(4, 3, -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, v| {
                let y = t.add(v[0], v[1])?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(4, 3, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "sub",
            params: vec![rand_dense(4, 3, -1.0, 1.0, &mut rng), rand_dense(4, 3, -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, v| {
                let y = t.sub(v[0], v[1])?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(3, 3, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "scale",
            params: vec![rand_dense(3, 3, -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, v| {
                let y = t.scale(v[0], -0.7)?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(4, 3, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "hadamard",
            params: vec![rand_dense(4, 3, -1.0, 1.0, &mut rng), rand_dense(4, 3, -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, v| {
                let y = t.hadamard(v[0], v[1])?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(3, 4, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "square",
            params: vec![rand_dense(3, 4, -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, v| {
                let y = t.square(v[0])?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(4, 4, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "relu",
            params: vec![rand_dense_no_kink(4, 4, &mut rng)],
            build: Box::new(move |t, v| {
                let y = t.relu(v[0])?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(3, 3, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "log_guard",
            params: vec![rand_dense(3, 3, 0.4, 1.4, &mut rng)],
            build: Box::new(move |t, v| {
                let y = t.log_guard(v[0], 1e-12)?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    cases.push(Case {
        name: "sum",
        params: vec![rand_dense(4, 3, -1.0, 1.0, &mut rng)],
        build: Box::new(|t, v| t.sum(v[0])),
    });
    cases.push(Case {
        name: "mean",
        params: vec![rand_dense(4, 3, -1.0, 1.0, &mut rng)],
        build: Box::new(|t, v| t.mean(v[0])),
    });
    cases.push(Case {
        name: "frob_sq",
        params: vec![rand_dense(4, 3, -1.0, 1.0, &mut rng)],
        build: Box::new(|t, v| t.frob_sq(v[0])),
    });
    {
        let k = rand_dense(4, 3, -1.0, 1.0, &mut rng);
        let k2 = rand_dense(4, 3, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "mul_const",
            params: vec![rand_dense(4, 3, -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, v| {
                let kid = t.register_const(k2.clone());
                let y = t.mul_const(v[0], kid)?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(4, 4, -1.0, 1.0, &mut rng);
        let keep: Vec<bool> = (0..16).map(|_| rng.gen::<f64>() < 0.6).collect();
        cases.push(Case {
            name: "mask_const",
            params: vec![rand_dense(4, 4, -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, v| {
                let mask = t.register_mask(BitMask::from_fn(4, 4, |i, j| keep[i * 4 + j]));
                let y = t.mask_const(v[0], mask)?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(4, 2, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "matmul",
            params: vec![rand_dense(4, 3, -1.0, 1.0, &mut rng), rand_dense(3, 2, -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(4, 2, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "matmul_tn",
            params: vec![rand_dense(3, 4, -1.0, 1.0, &mut rng), rand_dense(3, 2, -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, v| {
                let y = t.matmul_tn(v[0], v[1])?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(5, 3, -1.0, 1.0, &mut rng);
        let s = rand_csr(5, 4, 0.4, &mut rng);
        cases.push(Case {
            name: "spmm",
            params: vec![rand_dense(4, 3, -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, v| {
                let sid = t.register_csr(s.clone());
                let y = t.spmm(sid, v[0])?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(4, 4, -1.0, 1.0, &mut rng);
        let s = rand_csr(4, 4, 0.4, &mut rng);
        cases.push(Case {
            name: "add_sparse_scaled",
            params: vec![rand_dense(4, 4, -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, v| {
                let sid = t.register_csr(s.clone());
                let y = t.add_sparse_scaled(v[0], sid, 0.6)?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(4, 4, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "row_normalize",
            params: vec![rand_dense(4, 4, 0.2, 1.2, &mut rng)],
            build: Box::new(move |t, v| {
                let y = t.row_normalize(v[0], false)?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(4, 1, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "row_sums",
            params: vec![rand_dense(4, 3, -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, v| {
                let y = t.row_sums(v[0])?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(3, 1, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "col_sums",
            params: vec![rand_dense(4, 3, -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, v| {
                let y = t.col_sums(v[0])?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(3, 3, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "recip",
            params: vec![rand_dense(3, 3, 0.5, 1.5, &mut rng)],
            build: Box::new(move |t, v| {
                let y = t.recip(v[0], 1e-12)?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(4, 3, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "row_scale",
            params: vec![rand_dense(4, 3, -1.0, 1.0, &mut rng), rand_dense(4, 1, 0.5, 1.5, &mut rng)],
            build: Box::new(move |t, v| {
                let y = t.row_scale(v[0], v[1])?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(4, 3, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "gather_rows",
            params: vec![rand_dense(5, 3, -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, v| {
                let idx = t.register_indices(vec![2, 0, 4, 2]);
                let y = t.gather_rows(v[0], idx)?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(1, 3, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "mean_pool_rows",
            params: vec![rand_dense(5, 3, -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, v| {
                let y = t.mean_pool_rows(v[0])?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(4, 4, -1.0, 1.0, &mut rng);
        let keep: Vec<bool> = (0..16).map(|_| rng.gen::<f64>() < 0.7).collect();
        cases.push(Case {
            name: "dropout",
            params: vec![rand_dense(4, 4, -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, v| {
                let mask = t.register_mask(BitMask::from_fn(4, 4, |i, j| keep[i * 4 + j]));
                let y = t.dropout(v[0], mask, 0.7)?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
        cases.push(Case {
            name: "softmax_cross_entropy",
            params: vec![rand_dense(6, 3, -1.0, 1.0, &mut rng)],
            build: Box::new(move |t, v| {
                let l = t.register_indices(labels.clone());
                let m = t.register_indices(vec![0, 2, 4, 5]);
                t.softmax_cross_entropy(v[0], l, m)
            }),
        });
    }
    {
        let k = rand_dense(5, 5, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "multihead_cosine",
            params: vec![rand_dense(5, 4, 0.4, 1.4, &mut rng), rand_dense(2, 4, 0.5, 1.5, &mut rng)],
            build: Box::new(move |t, v| {
                let y = t.multihead_cosine(v[0], v[1])?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(5, 2, -1.0, 1.0, &mut rng);
        cases.push(Case {
            name: "anchor_cosine",
            params: vec![rand_dense(5, 4, 0.4, 1.4, &mut rng), rand_dense(2, 4, 0.5, 1.5, &mut rng)],
            build: Box::new(move |t, v| {
                let idx = t.register_indices(vec![1, 3]);
                let u = t.gather_rows(v[0], idx)?;
                let y = t.anchor_cosine(v[0], u, v[1])?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    {
        let k = rand_dense(4, 4, -1.0, 1.0, &mut rng);
        let l0 = rand_csr(4, 4, 0.5, &mut rng);
        cases.push(Case {
            name: "combine_graphs",
            params: vec![rand_dense(4, 4, 0.2, 1.2, &mut rng), rand_dense(4, 4, 0.2, 1.2, &mut rng)],
            build: Box::new(move |t, v| {
                let sid = t.register_csr(l0.clone());
                let y = t.combine_graphs(v[0], v[1], sid, 0.4, 0.3)?;
                weighted_sum(t, y, &k)
            }),
        });
    }
    cases
}

/// Runs every per-op case for one seed.
pub fn op_suite(seed: u64) -> Result<Vec<CheckReport>> {
    op_suite_with_fault(seed, None)
}

/// Same as [`op_suite`] but corrupting one op's backward rule, for verifying
/// the checker itself.
pub fn op_suite_with_fault(seed: u64, fault: Option<(OpKind, f64)>) -> Result<Vec<CheckReport>> {
    suite_cases(seed)
        .into_iter()
        .map(|case| {
            let err = compare_gradients(&case.params, case.build.as_ref(), fault)?;
            Ok(CheckReport {
                name: case.name.to_string(),
                max_rel_err: err,
                tol: 1e-5,
            })
        })
        .collect()
}

/// Worst error per op across several seeds.
pub fn op_suite_multi(seeds: impl IntoIterator<Item = u64>) -> Result<Vec<CheckReport>> {
    let mut merged: Vec<CheckReport> = Vec::new();
    for seed in seeds {
        let reports = op_suite(seed)?;
        if merged.is_empty() {
            merged = reports;
        } else {
            for (m, r) in merged.iter_mut().zip(reports) {
                m.max_rel_err = m.max_rel_err.max(r.max_rel_err);
            }
        }
    }
    Ok(merged)
}

/// Tolerance for the composed training loss: looser than the per-op bound
/// because errors accumulate across the iteration loop.
pub const E2E_TOL: f64 = 1e-4;

/// Finite-difference check of the whole training loss on a tiny dataset:
/// eight nodes, three refinement iterations, two metric heads, all four
/// parameter tensors perturbed. Dropout is off and the stopping threshold is
/// effectively zero so both the analytic and the recomputed passes run the
/// same fixed number of iterations; features are positive so no similarity
/// crosses the sparsification threshold under perturbation.
pub fn end_to_end(variant: crate::trainer::Variant, seed: u64) -> Result<CheckReport> {
    use crate::data_io::GraphDataset;
    use crate::graph_learner::MetricHeads;
    use crate::trainer::{
        forward_idgl, forward_idgl_anch, HyperParams, IdglParams, Mode, ParamVars, RunContext,
        Variant,
    };

    let n = 8;
    let d = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_dense(n, d, 0.1, 1.0, &mut rng);
    let ds = GraphDataset {
        x,
        a0: None,
        y: (0..n).map(|i| i % 2).collect(),
        train_idx: vec![0, 1, 2, 3],
        dev_idx: vec![4, 5],
        test_idx: vec![6, 7],
        n_classes: 2,
    };
    let hp = HyperParams {
        lambda_: 0.55,
        eta: 0.35,
        alpha: 0.2,
        beta: 0.1,
        gamma: 0.1,
        eps: 0.0,
        m: 2,
        delta: 1e-12,
        t_max: 3,
        k: Some(3),
        s: 4,
        hidden: 4,
        dropout: 0.0,
        iter_dropout: 0.0,
        seed,
        ..HyperParams::default()
    };
    let ctx = RunContext::build(&ds, &hp, variant)?;
    let init = IdglParams::init(d, hp.hidden, ds.n_classes, hp.m, seed)?;
    let params = vec![
        init.heads_feat.clone(),
        init.heads_emb.clone(),
        init.gcn.w1.clone(),
        init.gcn.w2.clone(),
    ];
    let build = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let pv = ParamVars {
            heads_feat: MetricHeads { w: vars[0] },
            heads_emb: MetricHeads { w: vars[1] },
            w1: vars[2],
            w2: vars[3],
        };
        let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, _) = match variant {
            Variant::Idgl => forward_idgl(tape, &pv, &ds, &ctx, &hp, Mode::Eval, &mut drop_rng)?,
            Variant::IdglAnch => {
                forward_idgl_anch(tape, &pv, &ds, &ctx, &hp, Mode::Eval, &mut drop_rng)?
            }
        };
        Ok(loss)
    };
    let err = compare_gradients(&params, &build, None)?;
    let name = match variant {
        Variant::Idgl => format!("e2e_idgl seed={seed}"),
        Variant::IdglAnch => format!("e2e_idgl_anch seed={seed}"),
    };
    Ok(CheckReport { name, max_rel_err: err, tol: E2E_TOL })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_three_seeds() {
        for seed in 0..3 {
            for report in op_suite(seed).unwrap() {
                assert!(report.passed(), "{report}");
            }
        }
    }

    #[test]
    fn end_to_end_passes_both_variants() {
        for variant in [crate::trainer::Variant::Idgl, crate::trainer::Variant::IdglAnch] {
            let report = end_to_end(variant, 1).unwrap();
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let reports = op_suite_with_fault(0, Some((OpKind::Matmul, 1.5))).unwrap();
        let matmul = reports.iter().find(|r| r.name == "matmul").unwrap();
        assert!(!matmul.passed());
        let relu = reports.iter().find(|r| r.name == "relu").unwrap();
        assert!(relu.passed());
    }
}
