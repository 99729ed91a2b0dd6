//! Graph quality losses: Dirichlet smoothness, connectivity log-barrier, and
//! Frobenius sparsity, over either the learned dense adjacency or the anchor
//! graph B-hat.

use crate::autodiff::{ConstId, Tape, Var};
use crate::autodiff::tape::RECIP_GUARD;
use crate::error::{IdglError, Result};
use crate::graph_learner::{AnchorAffinity, Strictness};
use crate::linalg::{kernels, Dense};

/// Tolerance factor for the strict symmetry check, relative to the largest
/// matrix entry. Accumulated rounding in an n-term inner product stays well
/// under this for every n this crate targets.
const SYM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct RegWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl RegWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(IdglError::InvalidInput(format!("{name} = {v} must be >= 0")));
            }
        }
        Ok(RegWeights { alpha, beta, gamma })
    }

    pub fn zero() -> Self {
        RegWeights { alpha: 0.0, beta: 0.0, gamma: 0.0 }
    }

    pub fn is_zero(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0
    }
}

/// Squared Euclidean distances between all row pairs, with an exactly zero
/// diagonal and negatives from cancellation clamped to zero.
pub fn pairwise_sq_dists(x: &Dense) -> Result<Dense> {
    let n = x.rows();
    let gram = kernels::matmul_nt(x, x)?;
    let mut out = Dense::zeros(n, n);
    let sq: Vec<f64> = (0..n).map(|i| x.row(i).iter().map(|v| v * v).sum()).collect();
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = if i == j { 0.0 } else { (sq[i] + sq[j] - 2.0 * gram[(i, j)]).max(0.0) };
        }
    }
    Ok(out)
}

fn check_square(op: &'static str, a: Var) -> Result<usize> {
    if a.rows() != a.cols() {
        return Err(IdglError::dims(op, a.shape(), a.shape()));
    }
    Ok(a.rows())
}

fn check_symmetric_value(tape: &Tape, a: Var) -> Result<()> {
    let v = tape.value(a);
    let tol = SYM_TOL * v.max_abs().max(1.0);
    let mut worst = 0.0_f64;
    for i in 0..v.rows() {
        for j in (i + 1)..v.cols() {
            worst = worst.max((v[(i, j)] - v[(j, i)]).abs());
        }
    }
    if worst > tol {
        return Err(IdglError::Asymmetric(worst));
    }
    Ok(())
}

/// Smoothness (1/(2n^2)) sum_ij a_ij ||x_i - x_j||^2, equal to
/// (1/n^2) tr(X^T L X) for symmetric a. Strict mode verifies the symmetry.
pub fn dirichlet_energy(tape: &mut Tape, a: Var, x: &Dense, strictness: Strictness) -> Result<Var> {
    let n = check_square("dirichlet_energy", a)?;
    if x.rows() != n {
        return Err(IdglError::dims("dirichlet_energy", a.shape(), x.shape()));
    }
    let k = tape.register_const(pairwise_sq_dists(x)?);
    dirichlet_energy_cached(tape, a, k, strictness)
}

/// Same with the distance matrix registered once and reused across
/// iterations.
pub fn dirichlet_energy_cached(
    tape: &mut Tape,
    a: Var,
    dists: ConstId,
    strictness: Strictness,
) -> Result<Var> {
    let n = check_square("dirichlet_energy", a)?;
    if strictness == Strictness::Strict {
        check_symmetric_value(tape, a)?;
    }
    let weighted = tape.mul_const(a, dists)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, 1.0 / (2.0 * (n * n) as f64))
}

/// Connectivity log-barrier plus Frobenius sparsity:
/// (-beta/n) 1^T log(A 1) + (gamma/n^2) ||A||_F^2. Strict mode rejects a
/// non-positive row sum when beta > 0; guarded mode shifts the log by 1e-12.
pub fn connectivity_sparsity(
    tape: &mut Tape,
    a: Var,
    beta: f64,
    gamma: f64,
    strictness: Strictness,
) -> Result<Var> {
    let n = check_square("connectivity_sparsity", a)?;
    let mut terms: Vec<Var> = Vec::new();
    if beta > 0.0 {
        let degrees = tape.row_sums(a)?;
        if strictness == Strictness::Strict {
            let d = tape.value(degrees);
            for i in 0..n {
                if d[(i, 0)] <= 0.0 {
                    return Err(IdglError::BarrierDomain(i));
                }
            }
        }
        let logs = tape.log_guard(degrees, RECIP_GUARD)?;
        let total = tape.sum(logs)?;
        terms.push(tape.scale(total, -beta / n as f64)?);
    }
    if gamma > 0.0 {
        let fro = tape.frob_sq(a)?;
        terms.push(tape.scale(fro, gamma / (n * n) as f64)?);
    }
    sum_terms(tape, terms)
}

fn sum_terms(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for t in terms {
        acc = Some(match acc {
            Some(prev) => tape.add(prev, t)?,
            None => t,
        });
    }
    Ok(match acc {
        Some(v) => v,
        None => tape.constant(Dense::scalar(0.0)),
    })
}

/// alpha * dirichlet + connectivity/sparsity. Zero-weight terms are skipped,
/// so alpha = beta = gamma = 0 contributes a constant zero to the loss.
pub fn graph_reg_loss(
    tape: &mut Tape,
    a: Var,
    x: &Dense,
    rw: &RegWeights,
    strictness: Strictness,
) -> Result<Var> {
    let dists = if rw.alpha > 0.0 {
        Some(tape.register_const(pairwise_sq_dists(x)?))
    } else {
        None
    };
    graph_reg_loss_cached(tape, a, dists, rw, strictness)
}

/// `dists` may be None only when alpha = 0.
pub fn graph_reg_loss_cached(
    tape: &mut Tape,
    a: Var,
    dists: Option<ConstId>,
    rw: &RegWeights,
    strictness: Strictness,
) -> Result<Var> {
    let mut terms: Vec<Var> = Vec::new();
    if rw.alpha > 0.0 {
        let k = dists.ok_or_else(|| {
            IdglError::InvalidInput("alpha > 0 needs a distance matrix".into())
        })?;
        let energy = dirichlet_energy_cached(tape, a, k, strictness)?;
        terms.push(tape.scale(energy, rw.alpha)?);
    }
    if rw.beta > 0.0 || rw.gamma > 0.0 {
        terms.push(connectivity_sparsity(tape, a, rw.beta, rw.gamma, strictness)?);
    }
    sum_terms(tape, terms)
}

/// Regularizes the anchor graph: builds B-hat = R^T Delta^-1 R on the tape
/// and applies graph_reg_loss over the anchor rows, with every normalizer
/// using s instead of n.
pub fn anchor_reg_loss(
    tape: &mut Tape,
    aff: &AnchorAffinity,
    x_anchor: &Dense,
    rw: &RegWeights,
    strictness: Strictness,
) -> Result<Var> {
    let dists = if rw.alpha > 0.0 {
        Some(tape.register_const(pairwise_sq_dists(x_anchor)?))
    } else {
        None
    };
    anchor_reg_loss_cached(tape, aff, dists, rw, strictness)
}

pub fn anchor_reg_loss_cached(
    tape: &mut Tape,
    aff: &AnchorAffinity,
    dists: Option<ConstId>,
    rw: &RegWeights,
    strictness: Strictness,
) -> Result<Var> {
    let s = aff.r.cols();
    if rw.beta > 0.0 && s < 2 {
        return Err(IdglError::InvalidInput(format!(
            "connectivity barrier needs at least 2 anchors, got {s}"
        )));
    }
    if rw.is_zero() {
        return Ok(tape.constant(Dense::scalar(0.0)));
    }
    let bhat = build_bhat(tape, aff)?;
    graph_reg_loss_cached(tape, bhat, dists, rw, strictness)
}

/// B-hat = R^T Delta^-1 R, the unnormalized anchor graph (s x s, symmetric
/// up to rounding, positive semidefinite).
pub fn build_bhat(tape: &mut Tape, aff: &AnchorAffinity) -> Result<Var> {
    let dinv = tape.recip(aff.delta, RECIP_GUARD)?;
    let rd = tape.row_scale(aff.r, dinv)?;
    tape.matmul_tn(aff.r, rd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_dense(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Dense {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dense::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect())
            .unwrap()
    }

    fn rand_symmetric(n: usize, seed: u64) -> Dense {
        let raw = rand_dense(n, n, 0.0, 1.0, seed);
        let mut out = Dense::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] = 0.5 * (raw[(i, j)] + raw[(j, i)]);
            }
        }
        out
    }

    fn scalar_value(tape: &Tape, v: Var) -> f64 {
        tape.value(v)[(0, 0)]
    }

    /// (1/n^2) tr(X^T (D - A) X) computed with dense kernels.
    fn trace_form(a: &Dense, x: &Dense) -> f64 {
        let n = a.rows();
        let mut l = a.clone();
        l.scale_in_place(-1.0);
        for (i, d) in a.row_sums().into_iter().enumerate() {
            l[(i, i)] += d;
        }
        let lx = kernels::matmul(&l, x).unwrap();
        let xtlx = kernels::matmul_tn(x, &lx).unwrap();
        (0..x.cols()).map(|c| xtlx[(c, c)]).sum::<f64>() / (n * n) as f64
    }

    #[test]
    fn dirichlet_zero_for_constant_signal() {
        let mut tape = Tape::new();
        let a = tape.leaf(rand_symmetric(4, 1), false);
        let x = Dense::from_rows(&vec![vec![2.0, -1.0]; 4]).unwrap();
        let e = dirichlet_energy(&mut tape, a, &x, Strictness::Strict).unwrap();
        assert_eq!(scalar_value(&tape, e), 0.0);
    }

    #[test]
    fn dirichlet_zero_for_empty_graph() {
        let mut tape = Tape::new();
        let a = tape.leaf(Dense::zeros(4, 4), false);
        let e = dirichlet_energy(&mut tape, a, &rand_dense(4, 3, -1.0, 1.0, 2), Strictness::Strict)
            .unwrap();
        assert_eq!(scalar_value(&tape, e), 0.0);
    }

    #[test]
    fn dirichlet_path_hand_case() {
        let mut tape = Tape::new();
        let a_raw = Dense::from_rows(&[
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ])
        .unwrap();
        let x = Dense::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        let a = tape.leaf(a_raw.clone(), false);
        let e = dirichlet_energy(&mut tape, a, &x, Strictness::Strict).unwrap();
        let got = scalar_value(&tape, e);
        assert!((got - 5.0 / 9.0).abs() < 1e-12);
        assert!((got - trace_form(&a_raw, &x)).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_agrees_with_trace_form() {
        for seed in 0..5 {
            let a_raw = rand_symmetric(7, 10 + seed);
            let x = rand_dense(7, 3, -2.0, 2.0, 20 + seed);
            let mut tape = Tape::new();
            let a = tape.leaf(a_raw.clone(), false);
            let e = dirichlet_energy(&mut tape, a, &x, Strictness::Strict).unwrap();
            let got = scalar_value(&tape, e);
            assert!(got >= 0.0);
            assert!((got - trace_form(&a_raw, &x)).abs() < 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn dirichlet_zero_iff_edges_join_identical_rows() {
        let x = Dense::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let only_twins =
            Dense::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0; 3]]).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(only_twins, false);
        let e = dirichlet_energy(&mut tape, a, &x, Strictness::Strict).unwrap();
        assert_eq!(scalar_value(&tape, e), 0.0);

        let crossing =
            Dense::from_rows(&[vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]])
                .unwrap();
        let a2 = tape.leaf(crossing, false);
        let e2 = dirichlet_energy(&mut tape, a2, &x, Strictness::Strict).unwrap();
        assert!(scalar_value(&tape, e2) > 0.0);
    }

    #[test]
    fn dirichlet_strict_rejects_asymmetric() {
        let mut tape = Tape::new();
        let mut a_raw = rand_symmetric(4, 30);
        a_raw[(0, 1)] += 0.5;
        let a = tape.leaf(a_raw, false);
        let x = rand_dense(4, 2, -1.0, 1.0, 31);
        assert!(matches!(
            dirichlet_energy(&mut tape, a, &x, Strictness::Strict),
            Err(IdglError::Asymmetric(_))
        ));
        assert!(dirichlet_energy(&mut tape, a, &x, Strictness::Guarded).is_ok());
    }

    #[test]
    fn connectivity_zero_weights_zero_loss() {
        let mut tape = Tape::new();
        let a = tape.leaf(rand_symmetric(3, 40), false);
        let c = connectivity_sparsity(&mut tape, a, 0.0, 0.0, Strictness::Strict).unwrap();
        assert_eq!(scalar_value(&tape, c), 0.0);
    }

    #[test]
    fn connectivity_unit_degrees_leave_only_sparsity() {
        let mut tape = Tape::new();
        let a_raw = Dense::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let a = tape.leaf(a_raw.clone(), false);
        let c = connectivity_sparsity(&mut tape, a, 2.0, 3.0, Strictness::Strict).unwrap();
        let want = 3.0 / 4.0 * a_raw.frob_sq();
        assert!((scalar_value(&tape, c) - want).abs() < 1e-9);
    }

    #[test]
    fn connectivity_hand_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(Dense::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap(), false);
        let c = connectivity_sparsity(&mut tape, a, 1.0, 1.0, Strictness::Strict).unwrap();
        let want = 2.0 - 2.0_f64.ln();
        assert!((scalar_value(&tape, c) - want).abs() < 1e-9);
    }

    #[test]
    fn connectivity_barrier_domain() {
        let mut tape = Tape::new();
        let a_raw = Dense::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0; 3]])
            .unwrap();
        let a = tape.leaf(a_raw, false);
        assert!(matches!(
            connectivity_sparsity(&mut tape, a, 1.0, 0.0, Strictness::Strict),
            Err(IdglError::BarrierDomain(2))
        ));
        let guarded = connectivity_sparsity(&mut tape, a, 1.0, 0.0, Strictness::Guarded).unwrap();
        assert!(scalar_value(&tape, guarded).is_finite());
    }

    #[test]
    fn reg_loss_zero_weights() {
        let mut tape = Tape::new();
        let a = tape.leaf(rand_symmetric(4, 50), false);
        let loss = graph_reg_loss(
            &mut tape,
            a,
            &rand_dense(4, 2, -1.0, 1.0, 51),
            &RegWeights::zero(),
            Strictness::Strict,
        )
        .unwrap();
        assert_eq!(scalar_value(&tape, loss), 0.0);
    }

    #[test]
    fn reg_loss_decomposes_into_terms() {
        let rw = RegWeights::new(0.4, 0.2, 0.3).unwrap();
        let a_raw = rand_symmetric(5, 60);
        let x = rand_dense(5, 3, -1.0, 1.0, 61);
        let mut tape = Tape::new();
        let a = tape.leaf(a_raw, false);
        let total = graph_reg_loss(&mut tape, a, &x, &rw, Strictness::Strict).unwrap();
        let energy = dirichlet_energy(&mut tape, a, &x, Strictness::Strict).unwrap();
        let conn = connectivity_sparsity(&mut tape, a, rw.beta, rw.gamma, Strictness::Strict)
            .unwrap();
        let want = rw.alpha * scalar_value(&tape, energy) + scalar_value(&tape, conn);
        assert!((scalar_value(&tape, total) - want).abs() < 1e-12);
    }

    #[test]
    fn reg_loss_gradient_matches_finite_differences() {
        let rw = RegWeights::new(0.7, 0.4, 0.5).unwrap();
        let x = rand_dense(5, 3, -1.0, 1.0, 71);
        let a0 = rand_dense(5, 5, 0.2, 1.0, 72);
        let err = gradcheck::compare_gradients(
            &[a0],
            &|tape, params| graph_reg_loss(tape, params[0], &x, &rw, Strictness::Guarded),
            None,
        )
        .unwrap();
        assert!(err < 1e-5, "reg loss rel err {err}");
    }

    fn affinity_from(tape: &mut Tape, r: Dense) -> AnchorAffinity {
        let s = r.cols();
        let rv = tape.leaf(r, true);
        let delta = tape.row_sums(rv).unwrap();
        let lambda_ = tape.col_sums(rv).unwrap();
        AnchorAffinity { r: rv, delta, lambda_, anchor_idx: (0..s).collect() }
    }

    #[test]
    fn anchor_identity_r_has_zero_smoothness() {
        let mut tape = Tape::new();
        let aff = affinity_from(&mut tape, Dense::identity(3));
        let rw = RegWeights::new(1.0, 0.0, 0.0).unwrap();
        let x_anchor = rand_dense(3, 4, -1.0, 1.0, 80);
        let loss = anchor_reg_loss(&mut tape, &aff, &x_anchor, &rw, Strictness::Guarded).unwrap();
        assert_eq!(scalar_value(&tape, loss), 0.0);
    }

    #[test]
    fn bhat_symmetric_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        for seed in 0..5 {
            let mut tape = Tape::new();
            let aff = affinity_from(&mut tape, rand_dense(12, 4, 0.1, 1.0, 91 + seed));
            let b = build_bhat(&mut tape, &aff).unwrap();
            let bv = tape.value(b);
            for k in 0..4 {
                for l in 0..4 {
                    assert!((bv[(k, l)] - bv[(l, k)]).abs() < 1e-12);
                }
            }
            for _ in 0..10 {
                let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut quad = 0.0;
                for k in 0..4 {
                    for l in 0..4 {
                        quad += z[k] * bv[(k, l)] * z[l];
                    }
                }
                assert!(quad >= -1e-12);
            }
        }
    }

    #[test]
    fn anchor_barrier_needs_two_anchors() {
        let mut tape = Tape::new();
        let aff = affinity_from(&mut tape, rand_dense(5, 1, 0.1, 1.0, 95));
        let rw = RegWeights::new(0.0, 0.5, 0.0).unwrap();
        let x_anchor = rand_dense(1, 2, -1.0, 1.0, 96);
        assert!(anchor_reg_loss(&mut tape, &aff, &x_anchor, &rw, Strictness::Guarded).is_err());
    }

    #[test]
    fn loss_invariant_under_relabeling() {
        let rw = RegWeights::new(0.5, 0.3, 0.4).unwrap();
        let n = 6;
        let a_raw = rand_symmetric(n, 100);
        let x = rand_dense(n, 3, -1.0, 1.0, 101);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut a_p = Dense::zeros(n, n);
        let mut x_p = Dense::zeros(n, 3);
        for i in 0..n {
            for j in 0..n {
                a_p[(i, j)] = a_raw[(perm[i], perm[j])];
            }
            for c in 0..3 {
                x_p[(i, c)] = x[(perm[i], c)];
            }
        }
        let eval = |a_m: &Dense, x_m: &Dense| {
            let mut tape = Tape::new();
            let a = tape.leaf(a_m.clone(), false);
            let loss = graph_reg_loss(&mut tape, a, x_m, &rw, Strictness::Strict).unwrap();
            scalar_value(&tape, loss)
        };
        assert!((eval(&a_raw, &x) - eval(&a_p, &x_p)).abs() < 1e-10);
    }

    #[test]
    fn reg_weights_reject_negative() {
        assert!(RegWeights::new(-0.1, 0.0, 0.0).is_err());
        assert!(RegWeights::new(0.0, f64::NAN, 0.0).is_err());
    }
}
