//! Structure learning: multi-head weighted cosine similarity, epsilon
//! sparsification, anchor affinity, and mixing of learned and initial graphs.

use crate::autodiff::{BitMask, CsrId, Tape, Var};
use crate::error::{IdglError, Result};
use crate::linalg::Dense;

/// Whether degenerate inputs raise errors or fall back to guarded
/// arithmetic. Public entry points check strictly; the training loop runs
/// guarded so a transient zero norm cannot abort an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strictness {
    Strict,
    Guarded,
}

/// One set of m learnable metric weight vectors, stored as an m x dim leaf.
#[derive(Debug, Clone, Copy)]
pub struct MetricHeads {
    pub w: Var,
}

impl MetricHeads {
    pub fn new(tape: &mut Tape, w: Dense) -> Result<Self> {
        if w.rows() == 0 {
            return Err(IdglError::InvalidInput("need at least one metric head".into()));
        }
        if !w.is_finite() {
            return Err(IdglError::NonFinite("metric head weights"));
        }
        Ok(MetricHeads { w: tape.leaf(w, true) })
    }

    pub fn m(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }
}

/// Similarity and its sparsified form for one refinement step.
#[derive(Debug, Clone, Copy)]
pub struct LearnedGraph {
    pub s: Var,
    pub a: Var,
    pub nnz: usize,
}

/// Node-to-anchor affinities with their row and column sums.
#[derive(Debug, Clone)]
pub struct AnchorAffinity {
    pub r: Var,
    pub delta: Var,
    pub lambda_: Var,
    pub anchor_idx: Vec<usize>,
}

/// s_ij = (1/m) sum_p cos(w_p * v_i, w_p * v_j). Strict mode rejects any
/// weighted row with zero norm; guarded mode lets the in-kernel reciprocal
/// guard absorb it.
pub fn multihead_cosine(
    tape: &mut Tape,
    v: Var,
    heads: &MetricHeads,
    strictness: Strictness,
) -> Result<Var> {
    if heads.dim() != v.cols() {
        return Err(IdglError::dims("multihead_cosine", v.shape(), heads.w.shape()));
    }
    if strictness == Strictness::Strict {
        check_weighted_norms(tape, v, heads)?;
    }
    tape.multihead_cosine(v, heads.w)
}

fn check_weighted_norms(tape: &Tape, v: Var, heads: &MetricHeads) -> Result<()> {
    let vv = tape.value(v);
    let wv = tape.value(heads.w);
    for p in 0..heads.m() {
        let wrow = wv.row(p);
        for i in 0..vv.rows() {
            let sq: f64 = vv.row(i).iter().zip(wrow).map(|(&x, &w)| (w * x) * (w * x)).sum();
            if sq == 0.0 {
                return Err(IdglError::DegenerateNorm(i, p));
            }
        }
    }
    Ok(())
}

/// Zeroes entries below `eps`; the surviving entries pass through unchanged
/// and the mask is constant with respect to gradients. Returns the masked
/// matrix and the surviving-entry count.
pub fn epsilon_sparsify(tape: &mut Tape, s: Var, eps: f64) -> Result<(Var, usize)> {
    if eps < 0.0 {
        return Err(IdglError::InvalidInput(format!("negative threshold {eps}")));
    }
    let mask = BitMask::from_threshold(tape.value(s), eps);
    let nnz = mask.count_ones();
    let id = tape.register_mask(mask);
    Ok((tape.mask_const(s, id)?, nnz))
}

/// Full similarity stage: cosine followed by sparsification.
pub fn learn_graph(
    tape: &mut Tape,
    v: Var,
    heads: &MetricHeads,
    eps: f64,
    strictness: Strictness,
) -> Result<LearnedGraph> {
    let s = multihead_cosine(tape, v, heads, strictness)?;
    let (a, nnz) = epsilon_sparsify(tape, s, eps)?;
    Ok(LearnedGraph { s, a, nnz })
}

/// Node-to-anchor affinity r_ik = (1/m) sum_p cos(w_p * v_i, w_p * u_k),
/// eps-masked, with delta / lambda recomputed from the masked matrix.
/// `anchors` must hold exactly the rows of `v` selected by `anchor_idx`.
pub fn anchor_affinity(
    tape: &mut Tape,
    v: Var,
    anchors: Var,
    anchor_idx: &[usize],
    heads: &MetricHeads,
    eps: f64,
    strictness: Strictness,
) -> Result<AnchorAffinity> {
    if anchor_idx.is_empty() {
        return Err(IdglError::InvalidInput("need at least one anchor".into()));
    }
    if anchors.rows() != anchor_idx.len() || anchors.cols() != v.cols() {
        return Err(IdglError::dims("anchor_affinity", anchors.shape(), v.shape()));
    }
    for (k, &i) in anchor_idx.iter().enumerate() {
        if i >= v.rows() {
            return Err(IdglError::InvalidInput(format!("anchor index {i} out of range")));
        }
        if tape.value(anchors).row(k) != tape.value(v).row(i) {
            return Err(IdglError::InvalidInput(format!(
                "anchor row {k} does not match node {i}"
            )));
        }
    }
    if strictness == Strictness::Strict {
        check_weighted_norms(tape, v, heads)?;
    }
    let raw = tape.anchor_cosine(v, anchors, heads.w)?;
    let mask = BitMask::from_threshold(tape.value(raw), eps);
    let id = tape.register_mask(mask);
    let r = tape.mask_const(raw, id)?;
    let delta = tape.row_sums(r)?;
    let lambda_ = tape.col_sums(r)?;
    if strictness == Strictness::Strict {
        let lv = tape.value(lambda_);
        for k in 0..lv.rows() {
            if lv[(k, 0)] == 0.0 {
                return Err(IdglError::IsolatedAnchor(k));
            }
        }
    }
    Ok(AnchorAffinity { r, delta, lambda_, anchor_idx: anchor_idx.to_vec() })
}

/// A_tilde = lambda L0 + (1 - lambda)[eta rownorm(a_t) + (1 - eta) rownorm(a_1)].
/// Zero-coefficient branches are skipped so lambda = 1 reproduces L0 exactly.
pub fn combine_graphs(
    tape: &mut Tape,
    l0: CsrId,
    a_t: Var,
    a_1: Var,
    lambda: f64,
    eta: f64,
) -> Result<Var> {
    for (name, x) in [("lambda", lambda), ("eta", eta)] {
        if !(0.0..=1.0).contains(&x) {
            return Err(IdglError::InvalidInput(format!("{name} = {x} out of [0,1]")));
        }
    }
    tape.combine_graphs(a_t, a_1, l0, lambda, eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::linalg::CsrSparse;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_dense(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Dense {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dense::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect())
            .unwrap()
    }

    fn ones_heads(tape: &mut Tape, m: usize, dim: usize) -> MetricHeads {
        MetricHeads::new(tape, Dense::full(m, dim, 1.0)).unwrap()
    }

    #[test]
    fn identical_rows_give_unit_similarity() {
        let mut tape = Tape::new();
        let v = tape.leaf(
            Dense::from_rows(&[vec![0.3, -0.7, 2.0], vec![0.3, -0.7, 2.0]]).unwrap(),
            false,
        );
        let heads = MetricHeads::new(&mut tape, rand_dense(2, 3, 0.2, 1.0, 1)).unwrap();
        let s = multihead_cosine(&mut tape, v, &heads, Strictness::Strict).unwrap();
        assert!((tape.value(s)[(0, 1)] - 1.0).abs() < 1e-9);
        assert!((tape.value(s)[(1, 1)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_allones_head_matches_plain_cosine() {
        let mut tape = Tape::new();
        let x = rand_dense(7, 4, -1.0, 1.0, 3);
        let v = tape.leaf(x.clone(), false);
        let heads = ones_heads(&mut tape, 1, 4);
        let s = multihead_cosine(&mut tape, v, &heads, Strictness::Strict).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let (mut dot, mut ni, mut nj) = (0.0, 0.0, 0.0);
                for c in 0..4 {
                    dot += x[(i, c)] * x[(j, c)];
                    ni += x[(i, c)] * x[(i, c)];
                    nj += x[(j, c)] * x[(j, c)];
                }
                // Same guarded normalization as the kernel under test.
                let want = dot / ((ni.sqrt() + 1e-12) * (nj.sqrt() + 1e-12));
                assert!((tape.value(s)[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn four_heads_average_single_head_calls() {
        let w = rand_dense(4, 5, 0.1, 1.0, 5);
        let x = rand_dense(6, 5, -1.0, 1.0, 6);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), false);
        let heads = MetricHeads::new(&mut tape, w.clone()).unwrap();
        let s = multihead_cosine(&mut tape, v, &heads, Strictness::Strict).unwrap();
        let mut mean = Dense::zeros(6, 6);
        for p in 0..4 {
            let mut t = Tape::new();
            let vp = t.leaf(x.clone(), false);
            let hp = MetricHeads::new(&mut t, Dense::from_rows(&[w.row(p).to_vec()]).unwrap())
                .unwrap();
            let sp = multihead_cosine(&mut t, vp, &hp, Strictness::Strict).unwrap();
            mean.add_scaled_in_place(t.value(sp), 0.25).unwrap();
        }
        assert!(tape.value(s).max_abs_diff(&mean).unwrap() < 1e-12);
    }

    #[test]
    fn strict_rejects_zero_weighted_row() {
        let mut tape = Tape::new();
        let v = tape.leaf(Dense::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), false);
        let heads = MetricHeads::new(&mut tape, Dense::from_rows(&[vec![1.0, 0.0]]).unwrap())
            .unwrap();
        let strict = multihead_cosine(&mut tape, v, &heads, Strictness::Strict);
        assert!(matches!(strict, Err(IdglError::DegenerateNorm(1, 0))));
        let guarded = multihead_cosine(&mut tape, v, &heads, Strictness::Guarded).unwrap();
        assert!(tape.value(guarded).is_finite());
    }

    #[test]
    fn sparsify_thresholds() {
        let mut tape = Tape::new();
        let s = tape.leaf(Dense::from_rows(&[vec![1.0, 0.8], vec![0.8, 1.0]]).unwrap(), false);
        let (a, nnz) = epsilon_sparsify(&mut tape, s, 0.75).unwrap();
        assert_eq!(tape.value(a).as_slice(), &[1.0, 0.8, 0.8, 1.0]);
        assert_eq!(nnz, 4);

        let s2 = tape.leaf(Dense::from_rows(&[vec![1.0, 0.6], vec![0.6, 1.0]]).unwrap(), false);
        let (a2, nnz2) = epsilon_sparsify(&mut tape, s2, 0.75).unwrap();
        assert_eq!(tape.value(a2).as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(nnz2, 2);

        let (a3, nnz3) = epsilon_sparsify(&mut tape, s, 1.1).unwrap();
        assert_eq!(tape.value(a3).as_slice(), &[0.0; 4]);
        assert_eq!(nnz3, 0);
    }

    #[test]
    fn sparsify_eps_zero_keeps_nonnegative() {
        let mut tape = Tape::new();
        let s = tape.leaf(Dense::from_rows(&[vec![0.5, -0.2], vec![0.0, 1.0]]).unwrap(), false);
        let (a, nnz) = epsilon_sparsify(&mut tape, s, 0.0).unwrap();
        assert_eq!(tape.value(a).as_slice(), &[0.5, 0.0, 0.0, 1.0]);
        assert_eq!(nnz, 3);
    }

    #[test]
    fn anchors_equal_nodes_degenerates_to_full_similarity() {
        let x = rand_dense(6, 4, 0.1, 1.0, 9);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), false);
        let idx: Vec<usize> = (0..6).collect();
        let id = tape.register_indices(idx.clone());
        let anchors = tape.gather_rows(v, id).unwrap();
        let heads = MetricHeads::new(&mut tape, rand_dense(2, 4, 0.2, 1.0, 10)).unwrap();
        let aff =
            anchor_affinity(&mut tape, v, anchors, &idx, &heads, 0.0, Strictness::Strict).unwrap();
        let s = multihead_cosine(&mut tape, v, &heads, Strictness::Strict).unwrap();
        assert!(tape.value(aff.r).max_abs_diff(tape.value(s)).unwrap() < 1e-12);
    }

    #[test]
    fn anchor_self_affinity_is_one() {
        let x = rand_dense(5, 3, 0.1, 1.0, 11);
        let mut tape = Tape::new();
        let v = tape.leaf(x, false);
        let idx = vec![2usize];
        let id = tape.register_indices(idx.clone());
        let anchors = tape.gather_rows(v, id).unwrap();
        let heads = ones_heads(&mut tape, 1, 3);
        let aff =
            anchor_affinity(&mut tape, v, anchors, &idx, &heads, 0.0, Strictness::Strict).unwrap();
        assert!((tape.value(aff.r)[(2, 0)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn delta_lambda_match_direct_summation() {
        let x = rand_dense(10, 4, 0.1, 1.0, 13);
        let mut tape = Tape::new();
        let v = tape.leaf(x, false);
        let idx = vec![1usize, 4, 8];
        let id = tape.register_indices(idx.clone());
        let anchors = tape.gather_rows(v, id).unwrap();
        let heads = ones_heads(&mut tape, 1, 4);
        let aff =
            anchor_affinity(&mut tape, v, anchors, &idx, &heads, 0.0, Strictness::Strict).unwrap();
        let r = tape.value(aff.r).clone();
        for i in 0..10 {
            let want: f64 = (0..3).map(|k| r[(i, k)]).sum();
            assert!((tape.value(aff.delta)[(i, 0)] - want).abs() < 1e-12);
        }
        for k in 0..3 {
            let want: f64 = (0..10).map(|i| r[(i, k)]).sum();
            assert!((tape.value(aff.lambda_)[(k, 0)] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_anchor_strict_vs_guarded() {
        let x = rand_dense(4, 3, 0.1, 1.0, 17);
        let build = |tape: &mut Tape, strictness| {
            let v = tape.leaf(x.clone(), false);
            let idx = vec![0usize];
            let id = tape.register_indices(idx.clone());
            let anchors = tape.gather_rows(v, id).unwrap();
            let heads = ones_heads(tape, 1, 3);
            anchor_affinity(tape, v, anchors, &idx, &heads, 1.1, strictness)
        };
        let mut t1 = Tape::new();
        assert!(matches!(build(&mut t1, Strictness::Strict), Err(IdglError::IsolatedAnchor(0))));
        let mut t2 = Tape::new();
        let aff = build(&mut t2, Strictness::Guarded).unwrap();
        assert_eq!(t2.value(aff.lambda_)[(0, 0)], 0.0);
    }

    #[test]
    fn combine_lambda_one_is_initial_graph() {
        let l0 = CsrSparse::from_triplets(3, 3, vec![(0, 1, 0.5), (1, 0, 0.5), (2, 2, 1.0)])
            .unwrap();
        let mut tape = Tape::new();
        let id = tape.register_csr(l0.clone());
        let a_t = tape.leaf(rand_dense(3, 3, 0.0, 1.0, 19), false);
        let a_1 = tape.leaf(rand_dense(3, 3, 0.0, 1.0, 20), false);
        let out = combine_graphs(&mut tape, id, a_t, a_1, 1.0, 0.3).unwrap();
        assert_eq!(tape.value(out).as_slice(), l0.to_dense().as_slice());
    }

    #[test]
    fn combine_lambda_zero_eta_one_is_rownorm_a_t() {
        let mut tape = Tape::new();
        let id = tape.register_csr(CsrSparse::identity(3));
        let raw = rand_dense(3, 3, 0.1, 1.0, 21);
        let a_t = tape.leaf(raw.clone(), false);
        let a_1 = tape.leaf(rand_dense(3, 3, 0.0, 1.0, 22), false);
        let out = combine_graphs(&mut tape, id, a_t, a_1, 0.0, 1.0).unwrap();
        for i in 0..3 {
            let rs: f64 = raw.row(i).iter().sum();
            for j in 0..3 {
                assert!((tape.value(out)[(i, j)] - raw[(i, j)] / rs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn combine_hand_composed_four_nodes() {
        let (lambda, eta) = (0.8, 0.1);
        let l0 = CsrSparse::from_triplets(
            4,
            4,
            vec![(0, 1, 1.0), (1, 0, 1.0), (2, 3, 0.5), (3, 2, 0.5), (0, 0, 0.25)],
        )
        .unwrap();
        let at_raw = rand_dense(4, 4, 0.0, 1.0, 23);
        let a1_raw = rand_dense(4, 4, 0.0, 1.0, 24);
        let mut tape = Tape::new();
        let id = tape.register_csr(l0.clone());
        let a_t = tape.leaf(at_raw.clone(), false);
        let a_1 = tape.leaf(a1_raw.clone(), false);
        let out = combine_graphs(&mut tape, id, a_t, a_1, lambda, eta).unwrap();
        let rownorm = |m: &Dense, i: usize, j: usize| {
            let rs: f64 = m.row(i).iter().sum();
            if rs == 0.0 { 0.0 } else { m[(i, j)] / rs }
        };
        for i in 0..4 {
            for j in 0..4 {
                let want = lambda * l0.get(i, j)
                    + (1.0 - lambda)
                        * (eta * rownorm(&at_raw, i, j) + (1.0 - eta) * rownorm(&a1_raw, i, j));
                assert!((tape.value(out)[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn combine_rejects_out_of_range_weights() {
        let mut tape = Tape::new();
        let id = tape.register_csr(CsrSparse::identity(2));
        let a = tape.leaf(Dense::full(2, 2, 0.5), false);
        assert!(combine_graphs(&mut tape, id, a, a, 1.2, 0.5).is_err());
        assert!(combine_graphs(&mut tape, id, a, a, 0.5, -0.1).is_err());
    }

    #[test]
    fn similarity_bounded_and_exactly_symmetric() {
        for seed in 0..5 {
            let mut tape = Tape::new();
            let v = tape.leaf(rand_dense(9, 6, -2.0, 2.0, 100 + seed), false);
            let heads = MetricHeads::new(&mut tape, rand_dense(3, 6, 0.1, 1.0, 200 + seed))
                .unwrap();
            let s = multihead_cosine(&mut tape, v, &heads, Strictness::Strict).unwrap();
            let sv = tape.value(s);
            for i in 0..9 {
                for j in 0..9 {
                    assert!(sv[(i, j)].abs() <= 1.0);
                    assert_eq!(sv[(i, j)], sv[(j, i)]);
                }
            }
        }
    }

    #[test]
    fn cosine_scale_invariance() {
        let x = rand_dense(6, 4, -1.0, 1.0, 31);
        let mut scaled = x.clone();
        for v in scaled.row_mut(2) {
            *v *= 7.5;
        }
        let w = rand_dense(2, 4, 0.1, 1.0, 32);
        let eval = |data: &Dense| {
            let mut tape = Tape::new();
            let v = tape.leaf(data.clone(), false);
            let heads = MetricHeads::new(&mut tape, w.clone()).unwrap();
            let s = multihead_cosine(&mut tape, v, &heads, Strictness::Strict).unwrap();
            tape.value(s).clone()
        };
        assert!(eval(&x).max_abs_diff(&eval(&scaled)).unwrap() < 1e-9);
    }

    #[test]
    fn chain_gradient_matches_finite_differences() {
        let x = rand_dense(6, 4, 0.1, 1.0, 41);
        let l0 = CsrSparse::identity(6);
        let probe = rand_dense(6, 6, -1.0, 1.0, 42);
        let heads0 = rand_dense(2, 4, 0.3, 1.0, 43);
        let err = gradcheck::compare_gradients(
            &[heads0],
            &|tape, params| {
                let v = tape.leaf(x.clone(), false);
                let heads = MetricHeads { w: params[0] };
                let g = learn_graph(tape, v, &heads, 0.05, Strictness::Guarded)?;
                let id = tape.register_csr(l0.clone());
                let combined = combine_graphs(tape, id, g.a, g.a, 0.4, 0.3)?;
                let k = tape.leaf(probe.clone(), false);
                let weighted = tape.hadamard(combined, k)?;
                tape.sum(weighted)
            },
            None,
        )
        .unwrap();
        assert!(err < 1e-5, "chain gradient rel err {err}");
    }
}
