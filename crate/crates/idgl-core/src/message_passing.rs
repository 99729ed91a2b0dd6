//! GCN layers over dense, sparse, or hybrid adjacencies, the two-step anchor
//! message passing, and small recovery oracles for equivalence tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BitMask, CsrId, Tape, Var};
use crate::autodiff::tape::RECIP_GUARD;
use crate::error::{IdglError, Result};
use crate::graph_learner::AnchorAffinity;
use crate::linalg::Dense;

/// Recovery oracles refuse to materialize adjacencies past this size.
pub const ORACLE_LIMIT: usize = 500;

/// Persistent two-layer GCN weights; lifted onto a tape per forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnWeights {
    pub w1: Dense,
    pub w2: Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// Adjacency operand for a GCN layer.
#[derive(Debug, Clone, Copy)]
pub enum Adj<'a> {
    Dense(Var),
    Sparse(CsrId),
    Hybrid { l0: CsrId, r_t: &'a AnchorAffinity, r_1: &'a AnchorAffinity, lambda: f64, eta: f64 },
}

/// activation(adj . f . w), with optional dropout on the layer output.
pub fn gcn_layer(
    tape: &mut Tape,
    f: Var,
    adj: Adj,
    w: Var,
    activation: Activation,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<Var> {
    let propagated = match adj {
        Adj::Dense(a) => tape.matmul(a, f)?,
        Adj::Sparse(id) => tape.spmm(id, f)?,
        Adj::Hybrid { l0, r_t, r_1, lambda, eta } => {
            hybrid_mp(tape, f, l0, r_t, r_1, lambda, eta)?
        }
    };
    let mut out = tape.matmul(propagated, w)?;
    if activation == Activation::Relu {
        out = tape.relu(out)?;
    }
    if let Some((rate, rng)) = dropout {
        if rate > 0.0 {
            let keep = 1.0 - rate;
            let mask = BitMask::from_fn(out.rows(), out.cols(), |_, _| rng.gen::<f64>() < keep);
            let id = tape.register_mask(mask);
            out = tape.dropout(out, id, keep)?;
        }
    }
    Ok(out)
}

/// Node-anchor-node message passing: Delta^-1 R (Lambda^-1 R^T f), two
/// O(n s dim) products with no n x n intermediate. Rows with zero delta have
/// an all-zero r row (r is non-negative), so their output is zero despite the
/// guarded reciprocal.
pub fn mp12(tape: &mut Tape, f: Var, aff: &AnchorAffinity) -> Result<Var> {
    if aff.r.rows() != f.rows() {
        return Err(IdglError::dims("mp12", aff.r.shape(), f.shape()));
    }
    let rtf = tape.matmul_tn(aff.r, f)?;
    let lam_inv = tape.recip(aff.lambda_, RECIP_GUARD)?;
    let from_anchors = tape.row_scale(rtf, lam_inv)?;
    let rf = tape.matmul(aff.r, from_anchors)?;
    let del_inv = tape.recip(aff.delta, RECIP_GUARD)?;
    tape.row_scale(rf, del_inv)
}

/// Test oracle: the dense node-level random-walk matrix A = Delta^-1 R
/// Lambda^-1 R^T. Zero row or column sums map to zero rows (exact
/// reciprocals, not guarded, so row sums hit 1 at full precision).
pub fn recover_node_adjacency(tape: &Tape, aff: &AnchorAffinity) -> Result<Dense> {
    let n = aff.r.rows();
    if n > ORACLE_LIMIT {
        return Err(IdglError::OracleScale { n, limit: ORACLE_LIMIT });
    }
    let r = tape.value(aff.r);
    let delta = tape.value(aff.delta);
    let lambda_ = tape.value(aff.lambda_);
    let s = aff.r.cols();
    let mut out = Dense::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..s {
                let lam = lambda_[(k, 0)];
                if lam > 0.0 {
                    acc += r[(i, k)] * r[(j, k)] / lam;
                }
            }
            let d = delta[(i, 0)];
            out[(i, j)] = if d > 0.0 { acc / d } else { 0.0 };
        }
    }
    Ok(out)
}

/// Test oracle: the anchor-level matrix B = Lambda^-1 R^T Delta^-1 R.
pub fn recover_anchor_adjacency(tape: &Tape, aff: &AnchorAffinity) -> Result<Dense> {
    let r = tape.value(aff.r);
    let delta = tape.value(aff.delta);
    let lambda_ = tape.value(aff.lambda_);
    let (n, s) = aff.r.shape();
    let mut out = Dense::zeros(s, s);
    for k in 0..s {
        for l in 0..s {
            let mut acc = 0.0;
            for i in 0..n {
                let d = delta[(i, 0)];
                if d > 0.0 {
                    acc += r[(i, k)] * r[(i, l)] / d;
                }
            }
            let lam = lambda_[(k, 0)];
            out[(k, l)] = if lam > 0.0 { acc / lam } else { 0.0 };
        }
    }
    Ok(out)
}

/// lambda spmm(l0, f) + (1 - lambda)[eta mp12(f, r_t) + (1 - eta) mp12(f, r_1)].
/// Zero-coefficient branches are skipped entirely, so lambda = 1 returns the
/// sparse product bit for bit.
pub fn hybrid_mp(
    tape: &mut Tape,
    f: Var,
    l0: CsrId,
    r_t: &AnchorAffinity,
    r_1: &AnchorAffinity,
    lambda: f64,
    eta: f64,
) -> Result<Var> {
    for (name, x) in [("lambda", lambda), ("eta", eta)] {
        if !(0.0..=1.0).contains(&x) {
            return Err(IdglError::InvalidInput(format!("{name} = {x} out of [0,1]")));
        }
    }
    let mut terms: Vec<(f64, Var)> = Vec::new();
    if lambda > 0.0 {
        terms.push((lambda, tape.spmm(l0, f)?));
    }
    let c_t = (1.0 - lambda) * eta;
    if c_t > 0.0 {
        terms.push((c_t, mp12(tape, f, r_t)?));
    }
    let c_1 = (1.0 - lambda) * (1.0 - eta);
    if c_1 > 0.0 {
        terms.push((c_1, mp12(tape, f, r_1)?));
    }
    let mut acc: Option<Var> = None;
    for (c, v) in terms {
        let scaled = if c == 1.0 { v } else { tape.scale(v, c)? };
        acc = Some(match acc {
            Some(prev) => tape.add(prev, scaled)?,
            None => scaled,
        });
    }
    acc.ok_or_else(|| IdglError::InvalidInput("all mixing coefficients are zero".into()))
}
