//! Cross-checks the anchor pipeline against a dense reference. The reference
//! materializes the recovered node adjacency Delta^-1 R Lambda^-1 R^T at every
//! refinement step and runs plain-loop message passing, losses, and stopping,
//! so any divergence in the factorized path shows up as a mismatch here.

use idgl_core::autodiff::Tape;
use idgl_core::data_io::{synth_transductive, GraphDataset, SplitSpec};
use idgl_core::linalg::Dense;
use idgl_core::trainer::{
    forward_idgl_anch, lift_params, HyperParams, IdglParams, Mode, RunContext, Variant,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mm(a: &Dense, b: &Dense) -> Dense {
    assert_eq!(a.cols(), b.rows());
    let mut out = Dense::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for k in 0..a.cols() {
            let av = a[(i, k)];
            if av == 0.0 {
                continue;
            }
            for j in 0..b.cols() {
                out[(i, j)] += av * b[(k, j)];
            }
        }
    }
    out
}

fn gather(x: &Dense, idx: &[usize]) -> Dense {
    let mut out = Dense::zeros(idx.len(), x.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(x.row(i));
    }
    out
}

/// (1/m) sum_p cos(w_p * v_i, w_p * u_k) with the same +1e-12 norm guard as
/// the kernel under test, then entries below eps zeroed.
fn masked_affinity(v: &Dense, u: &Dense, w: &Dense, eps: f64) -> Dense {
    let (n, s, m, d) = (v.rows(), u.rows(), w.rows(), v.cols());
    let mut r = Dense::zeros(n, s);
    for p in 0..m {
        let wp = w.row(p);
        let vnorm: Vec<f64> = (0..n)
            .map(|i| v.row(i).iter().zip(wp).map(|(&x, &wv)| (wv * x) * (wv * x)).sum::<f64>().sqrt())
            .collect();
        let unorm: Vec<f64> = (0..s)
            .map(|k| u.row(k).iter().zip(wp).map(|(&x, &wv)| (wv * x) * (wv * x)).sum::<f64>().sqrt())
            .collect();
        for i in 0..n {
            for k in 0..s {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += (wp[c] * v[(i, c)]) * (wp[c] * u[(k, c)]);
                }
                r[(i, k)] += dot / ((vnorm[i] + 1e-12) * (unorm[k] + 1e-12)) / m as f64;
            }
        }
    }
    for x in r.as_mut_slice() {
        if *x < eps {
            *x = 0.0;
        }
    }
    r
}

/// Eq. 5 oracle: the dense random-walk matrix recovered from the affinity.
fn recovered_adjacency(r: &Dense) -> Dense {
    let (n, s) = (r.rows(), r.cols());
    let col: Vec<f64> = (0..s).map(|k| (0..n).map(|i| r[(i, k)]).sum()).collect();
    let row: Vec<f64> = (0..n).map(|i| r.row(i).iter().sum()).collect();
    let mut a = Dense::zeros(n, n);
    for i in 0..n {
        if row[i] <= 0.0 {
            continue;
        }
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..s {
                if col[k] > 0.0 {
                    acc += r[(i, k)] * r[(j, k)] / col[k];
                }
            }
            a[(i, j)] = acc / row[i];
        }
    }
    a
}

fn bhat(r: &Dense) -> Dense {
    let (n, s) = (r.rows(), r.cols());
    let row: Vec<f64> = (0..n).map(|i| r.row(i).iter().sum()).collect();
    let mut b = Dense::zeros(s, s);
    for k in 0..s {
        for l in 0..s {
            let mut acc = 0.0;
            for i in 0..n {
                if row[i] > 0.0 {
                    acc += r[(i, k)] * r[(i, l)] / row[i];
                }
            }
            b[(k, l)] = acc;
        }
    }
    b
}

fn reg_loss(b: &Dense, anchor_dists: &Dense, hp: &HyperParams) -> f64 {
    let s = b.rows();
    let mut loss = 0.0;
    if hp.alpha > 0.0 {
        let mut acc = 0.0;
        for k in 0..s {
            for l in 0..s {
                acc += b[(k, l)] * anchor_dists[(k, l)];
            }
        }
        loss += hp.alpha * acc / (2.0 * (s * s) as f64);
    }
    if hp.beta > 0.0 {
        // Same 1e-12 shift as the guarded log barrier under test.
        let mut acc = 0.0;
        for k in 0..s {
            acc += (b.row(k).iter().sum::<f64>() + 1e-12).ln();
        }
        loss += -hp.beta * acc / s as f64;
    }
    if hp.gamma > 0.0 {
        loss += hp.gamma * b.as_slice().iter().map(|x| x * x).sum::<f64>() / (s * s) as f64;
    }
    loss
}

fn cross_entropy(out: &Dense, y: &[usize], mask: &[usize]) -> f64 {
    let mut loss = 0.0;
    for &i in mask {
        let row = out.row(i);
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
        loss += z.ln() + mx - row[y[i]];
    }
    loss / mask.len() as f64
}

fn relu_in_place(x: &mut Dense) {
    for v in x.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn aggregate(vals: &[f64]) -> f64 {
    if vals.len() <= 1 {
        return vals.first().copied().unwrap_or(0.0);
    }
    vals[0] + vals[1..].iter().sum::<f64>() / (vals.len() - 1) as f64
}

struct Reference {
    total: f64,
    predictions: Dense,
    iterations: usize,
    deltas: Vec<f64>,
}

/// Plain-f64 replica of the anchor forward pass with every factorized product
/// replaced by an explicit dense one.
fn dense_reference(
    ds: &GraphDataset,
    ctx: &RunContext,
    params: &IdglParams,
    hp: &HyperParams,
) -> Reference {
    let x = &ds.x;
    let l0 = ctx.l0.to_dense();
    let anchor_dists = ctx.anchor_dists.clone().unwrap_or_else(|| Dense::zeros(0, 0));

    let mix = |a_t: &Dense, a_1: &Dense| {
        let mut out = l0.clone();
        out.scale_in_place(hp.lambda_);
        out.add_scaled_in_place(a_t, (1.0 - hp.lambda_) * hp.eta).unwrap();
        out.add_scaled_in_place(a_1, (1.0 - hp.lambda_) * (1.0 - hp.eta)).unwrap();
        out
    };
    let gcn = |adj: &Dense| {
        let mut z = mm(&mm(adj, x), &params.gcn.w1);
        relu_in_place(&mut z);
        let out = mm(&mm(adj, &z), &params.gcn.w2);
        (z, out)
    };

    let r1 = masked_affinity(x, &gather(x, &ctx.anchor_idx), &params.heads_feat, hp.eps);
    let a1 = recovered_adjacency(&r1);
    let (z1, out1) = gcn(&mix(&a1, &a1));
    let mut preds = vec![cross_entropy(&out1, &ds.y, &ds.train_idx)];
    let mut regs = vec![reg_loss(&bhat(&r1), &anchor_dists, hp)];

    let mut deltas = Vec::new();
    let mut r_prev = r1.clone();
    let mut z_prev = z1;
    let mut out_final = out1;
    let mut iterations = 1;
    for _t in 2..=hp.t_max {
        let anchors = gather(&z_prev, &ctx.anchor_idx);
        let r_t = masked_affinity(&z_prev, &anchors, &params.heads_emb, hp.eps);
        let a_t = recovered_adjacency(&r_t);
        let (z_t, out_t) = gcn(&mix(&a_t, &a1));
        preds.push(cross_entropy(&out_t, &ds.y, &ds.train_idx));
        regs.push(reg_loss(&bhat(&r_t), &anchor_dists, hp));

        iterations += 1;
        let diff: f64 = r_t
            .as_slice()
            .iter()
            .zip(r_prev.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let norm: f64 = r_t.as_slice().iter().map(|v| v * v).sum();
        deltas.push(if norm > 0.0 { diff / norm } else { 0.0 });
        r_prev = r_t;
        z_prev = z_t;
        out_final = out_t;
        if diff <= hp.delta * norm {
            break;
        }
    }

    Reference {
        total: aggregate(&preds) + aggregate(&regs),
        predictions: out_final,
        iterations,
        deltas,
    }
}

fn toy_dataset(n: usize, d: usize, seed: u64) -> GraphDataset {
    let split = SplitSpec { train: 10, dev: 8, test: None, seed };
    synth_transductive(n, d, 3, 0.3, 0.05, 0.6, seed, &split).unwrap()
}

fn run_pipeline(ds: &GraphDataset, hp: &HyperParams) -> (f64, Dense, usize, Vec<f64>, RunContext, IdglParams) {
    let ctx = RunContext::build(ds, hp, Variant::IdglAnch).unwrap();
    let params = IdglParams::init(ds.x.cols(), hp.hidden, ds.n_classes, hp.m, hp.seed).unwrap();
    let mut tape = Tape::new();
    let vars = lift_params(&mut tape, &params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (loss, trace) =
        forward_idgl_anch(&mut tape, &vars, ds, &ctx, hp, Mode::Eval, &mut rng).unwrap();
    (
        tape.value(loss)[(0, 0)],
        trace.predictions.clone(),
        trace.iterations_run,
        trace.deltas,
        ctx,
        params,
    )
}

fn assert_matches(ds: &GraphDataset, hp: &HyperParams) {
    let (loss, predictions, iterations, deltas, ctx, params) = run_pipeline(ds, hp);
    let want = dense_reference(ds, &ctx, &params, hp);

    assert_eq!(iterations, want.iterations, "iteration counts diverged");
    let rel = (loss - want.total).abs() / want.total.abs().max(1.0);
    assert!(rel < 1e-8, "loss {loss} vs reference {} (rel {rel})", want.total);
    let pred_diff = predictions.max_abs_diff(&want.predictions).unwrap();
    assert!(pred_diff < 1e-8, "prediction diff {pred_diff}");
    assert_eq!(deltas.len(), want.deltas.len());
    for (got, want) in deltas.iter().zip(&want.deltas) {
        assert!((got - want).abs() < 1e-8 * want.max(1.0), "delta {got} vs {want}");
    }
}

#[test]
fn full_run_matches_dense_reference() {
    let ds = toy_dataset(40, 6, 11);
    let hp = HyperParams {
        lambda_: 0.5,
        eta: 0.4,
        alpha: 0.3,
        beta: 0.2,
        gamma: 0.1,
        eps: 0.0,
        m: 2,
        delta: 1e-12,
        t_max: 4,
        s: 8,
        hidden: 5,
        dropout: 0.0,
        iter_dropout: 0.0,
        seed: 3,
        ..HyperParams::default()
    };
    assert_matches(&ds, &hp);
}

#[test]
fn sparsified_single_head_matches_dense_reference() {
    let ds = toy_dataset(30, 5, 23);
    let hp = HyperParams {
        lambda_: 0.2,
        eta: 0.7,
        alpha: 0.25,
        beta: 0.15,
        gamma: 0.2,
        eps: 0.3,
        m: 1,
        delta: 1e-12,
        t_max: 3,
        s: 6,
        hidden: 4,
        dropout: 0.0,
        iter_dropout: 0.0,
        seed: 7,
        ..HyperParams::default()
    };
    assert_matches(&ds, &hp);
}

#[test]
fn pure_learned_graph_matches_dense_reference() {
    // lambda = 0 removes the input-graph branch entirely.
    let ds = toy_dataset(25, 4, 31);
    let hp = HyperParams {
        lambda_: 0.0,
        eta: 0.5,
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.3,
        eps: 0.0,
        m: 2,
        delta: 1e-12,
        t_max: 3,
        s: 5,
        hidden: 4,
        dropout: 0.0,
        iter_dropout: 0.0,
        seed: 13,
        ..HyperParams::default()
    };
    assert_matches(&ds, &hp);
}

#[test]
fn early_stop_decision_matches_dense_reference() {
    let ds = toy_dataset(35, 5, 41);
    let base = HyperParams {
        lambda_: 0.4,
        eta: 0.6,
        alpha: 0.0,
        beta: 0.1,
        gamma: 0.1,
        eps: 0.0,
        m: 1,
        delta: 0.0,
        t_max: 6,
        s: 7,
        hidden: 4,
        dropout: 0.0,
        iter_dropout: 0.0,
        seed: 17,
        ..HyperParams::default()
    };
    // First pass with delta = 0 exposes the per-step deltas. The jump from
    // feature space to embedding space makes the t = 2 delta the largest by a
    // wide margin; a threshold in the middle of that gap stops both
    // implementations at t = 3 with room to spare against rounding.
    let (_, _, iterations, deltas, _, _) = run_pipeline(&ds, &base);
    assert_eq!(iterations, base.t_max);
    let first = deltas[0];
    let rest_max = deltas[1..].iter().cloned().fold(0.0_f64, f64::max);
    assert!(
        first > rest_max + 1e-6 * first,
        "no usable gap between deltas ({deltas:?})"
    );
    let hp = HyperParams { delta: (first + rest_max) / 2.0, ..base };
    let (_, _, iters_stopped, _, ctx, params) = run_pipeline(&ds, &hp);
    assert_eq!(iters_stopped, 3, "threshold should stop right after the gap");
    let want = dense_reference(&ds, &ctx, &params, &hp);
    assert_eq!(iters_stopped, want.iterations);
}

#[test]
fn recovered_adjacency_rows_are_stochastic_along_the_run() {
    let ds = toy_dataset(30, 5, 53);
    let hp = HyperParams {
        lambda_: 0.5,
        eta: 0.5,
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        eps: 0.0,
        m: 1,
        delta: 1e-12,
        t_max: 3,
        s: 6,
        hidden: 4,
        dropout: 0.0,
        iter_dropout: 0.0,
        seed: 29,
        ..HyperParams::default()
    };
    let ctx = RunContext::build(&ds, &hp, Variant::IdglAnch).unwrap();
    let params = IdglParams::init(ds.x.cols(), hp.hidden, ds.n_classes, hp.m, hp.seed).unwrap();
    let r1 = masked_affinity(&ds.x, &gather(&ds.x, &ctx.anchor_idx), &params.heads_feat, hp.eps);
    let a = recovered_adjacency(&r1);
    for i in 0..a.rows() {
        let sum: f64 = a.row(i).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
    }
}
