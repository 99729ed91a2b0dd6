//! Joint training: iterative graph refinement interleaved with GCN updates,
//! Adam optimization, dynamic-stopping evaluation, and dataset presets.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BitMask, ConstId, Tape, Var};
use crate::data_io::GraphDataset;
use crate::error::{IdglError, Result};
use crate::graph_construction::{knn_graph, sym_normalize};
use crate::graph_learner::{
    anchor_affinity, combine_graphs, learn_graph, MetricHeads, Strictness,
};
use crate::linalg::{CsrSparse, Dense};
use crate::message_passing::{gcn_layer, Activation, Adj, GcnWeights};
use crate::regularization::{
    anchor_reg_loss_cached, graph_reg_loss_cached, pairwise_sq_dists, RegWeights,
};

/// Which pipeline to run: dense refinement or the anchor decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Idgl,
    IdglAnch,
}

/// Train enables dropout; Eval disables it and never touches parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

const STREAM_INIT: u64 = 0;
const STREAM_ANCHORS: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Every knob of one run. `k` is the kNN fanout used only when the dataset
/// carries no input graph; `s` is the anchor count and is read only by the
/// anchor variant.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub lambda_: f64,
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eps: f64,
    pub m: usize,
    pub delta: f64,
    pub t_max: usize,
    pub k: Option<usize>,
    pub s: usize,
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub iter_dropout: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda_: 0.5,
            eta: 0.5,
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            eps: 0.0,
            m: 1,
            delta: 1e-3,
            t_max: 10,
            k: Some(20),
            s: 0,
            hidden: 16,
            lr: 0.01,
            weight_decay: 5e-4,
            dropout: 0.5,
            iter_dropout: 0.5,
            epochs: 1000,
            patience: 100,
            seed: 42,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, x) in [("lambda", self.lambda_), ("eta", self.eta)] {
            if !(0.0..=1.0).contains(&x) {
                return Err(IdglError::InvalidInput(format!("{name} = {x} out of [0,1]")));
            }
        }
        for (name, x) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("eps", self.eps),
            ("delta", self.delta),
            ("weight_decay", self.weight_decay),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(IdglError::InvalidInput(format!("{name} = {x} must be >= 0")));
            }
        }
        for (name, x) in [("dropout", self.dropout), ("iter_dropout", self.iter_dropout)] {
            if !(0.0..1.0).contains(&x) {
                return Err(IdglError::InvalidInput(format!("{name} = {x} out of [0,1)")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(IdglError::InvalidInput(format!("lr = {} must be positive", self.lr)));
        }
        for (name, x) in [
            ("m", self.m),
            ("t_max", self.t_max),
            ("hidden", self.hidden),
            ("epochs", self.epochs),
            ("patience", self.patience),
        ] {
            if x == 0 {
                return Err(IdglError::InvalidInput(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Published configuration for a named benchmark dataset, or None when the
/// variant was not tuned on it. Dataset names are matched case-insensitively.
pub fn paper_hyperparams(dataset: &str, variant: Variant) -> Option<HyperParams> {
    let base = HyperParams::default();
    let name = dataset.to_ascii_lowercase();
    let iter_dropout = match name.as_str() {
        "citeseer" => 0.0,
        "digits" => 0.3,
        _ => 0.5,
    };
    let hp = match (variant, name.as_str()) {
        (Variant::Idgl, "cora") => HyperParams {
            lambda_: 0.8, eta: 0.1, alpha: 0.2, beta: 0.0, gamma: 0.0,
            k: None, eps: 0.0, m: 4, delta: 4.0e-5, ..base
        },
        (Variant::Idgl, "citeseer") => HyperParams {
            lambda_: 0.6, eta: 0.5, alpha: 0.4, beta: 0.0, gamma: 0.2,
            k: None, eps: 0.3, m: 1, delta: 1.0e-3, ..base
        },
        (Variant::Idgl, "wine") => HyperParams {
            lambda_: 0.8, eta: 0.7, alpha: 0.1, beta: 0.1, gamma: 0.3,
            k: Some(20), eps: 0.75, m: 1, delta: 1.0e-3, ..base
        },
        (Variant::Idgl, "cancer") => HyperParams {
            lambda_: 0.25, eta: 0.1, alpha: 0.4, beta: 0.2, gamma: 0.1,
            k: Some(40), eps: 0.9, m: 1, delta: 1.0e-3, ..base
        },
        (Variant::Idgl, "digits") => HyperParams {
            lambda_: 0.4, eta: 0.1, alpha: 0.4, beta: 0.1, gamma: 0.0,
            k: Some(24), eps: 0.65, m: 8, delta: 1.0e-4, ..base
        },
        (Variant::IdglAnch, "cora") => HyperParams {
            lambda_: 0.8, eta: 0.1, alpha: 0.2, beta: 0.0, gamma: 0.1,
            k: None, eps: 0.0, m: 4, delta: 8.5e-5, s: 1000, ..base
        },
        (Variant::IdglAnch, "citeseer") => HyperParams {
            lambda_: 0.6, eta: 0.5, alpha: 0.5, beta: 0.1, gamma: 0.2,
            k: None, eps: 0.2, m: 4, delta: 2.0e-3, s: 1400, ..base
        },
        (Variant::IdglAnch, "pubmed") => HyperParams {
            lambda_: 0.7, eta: 0.3, alpha: 0.0, beta: 0.03, gamma: 0.0,
            k: None, eps: 0.1, m: 6, delta: 8.0e-5, s: 700, ..base
        },
        (Variant::IdglAnch, "wine") => HyperParams {
            lambda_: 0.7, eta: 0.7, alpha: 0.1, beta: 0.1, gamma: 0.3,
            k: Some(20), eps: 0.75, m: 1, delta: 1.0e-3, s: 200, ..base
        },
        (Variant::IdglAnch, "cancer") => HyperParams {
            lambda_: 0.25, eta: 0.1, alpha: 0.0, beta: 0.0, gamma: 0.0,
            k: Some(40), eps: 0.9, m: 4, delta: 8.0e-4, s: 100, ..base
        },
        (Variant::IdglAnch, "digits") => HyperParams {
            lambda_: 0.3, eta: 0.3, alpha: 0.4, beta: 0.1, gamma: 0.0,
            k: Some(24), eps: 0.65, m: 8, delta: 1.0e-4, s: 1500, ..base
        },
        _ => return None,
    };
    Some(HyperParams { iter_dropout, ..hp })
}

/// Trainable state: two metric-head banks (feature space and embedding
/// space) plus the two GCN weight matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct IdglParams {
    pub heads_feat: Dense,
    pub heads_emb: Dense,
    pub gcn: GcnWeights,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform01(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Dense {
    Dense::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen::<f64>()).collect())
        .expect("dimensions checked by caller")
}

fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Dense {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Dense::from_vec(
        fan_in,
        fan_out,
        (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect(),
    )
    .expect("dimensions checked by caller")
}

impl IdglParams {
    /// Metric heads are uniform on [0,1); GCN weights are Glorot-uniform.
    /// All draws come from one dedicated stream of the run seed.
    pub fn init(d: usize, hidden: usize, n_classes: usize, m: usize, seed: u64) -> Result<Self> {
        for (name, x) in [("d", d), ("hidden", hidden), ("n_classes", n_classes), ("m", m)] {
            if x == 0 {
                return Err(IdglError::InvalidInput(format!("{name} must be >= 1")));
            }
        }
        let mut rng = stream_rng(seed, STREAM_INIT);
        let heads_feat = uniform01(m, d, &mut rng);
        let heads_emb = uniform01(m, hidden, &mut rng);
        let w1 = glorot(d, hidden, &mut rng);
        let w2 = glorot(hidden, n_classes, &mut rng);
        Ok(IdglParams { heads_feat, heads_emb, gcn: GcnWeights { w1, w2 } })
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        vec![
            self.heads_feat.shape(),
            self.heads_emb.shape(),
            self.gcn.w1.shape(),
            self.gcn.w2.shape(),
        ]
    }
}

/// First and second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Dense>,
    v: Vec<Dense>,
    pub t: usize,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        AdamState {
            m: shapes.iter().map(|&(r, c)| Dense::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Dense::zeros(r, c)).collect(),
            t: 0,
        }
    }
}

/// One Adam update with decoupled-from-nothing weight decay: the decay term
/// is added to the gradient before the moment updates, matching the classic
/// L2 formulation.
pub fn adam_step(
    params: &mut [&mut Dense],
    grads: &[Dense],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(IdglError::InvalidInput(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        if p.shape() != grads[i].shape() || p.shape() != state.m[i].shape() {
            return Err(IdglError::dims("adam_step", p.shape(), grads[i].shape()));
        }
        let pv = p.as_mut_slice();
        let gv = grads[i].as_slice();
        let mv = state.m[i].as_mut_slice();
        let vv = state.v[i].as_mut_slice();
        for j in 0..pv.len() {
            let g = gv[j] + weight_decay * pv[j];
            mv[j] = ADAM_BETA1 * mv[j] + (1.0 - ADAM_BETA1) * g;
            vv[j] = ADAM_BETA2 * vv[j] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = mv[j] / bc1;
            let v_hat = vv[j] / bc2;
            pv[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Per-run precomputation shared by every epoch: the normalized input graph,
/// cached pairwise distances for the smoothness term, and the anchor sample.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub l0: CsrSparse,
    pub dists: Option<Dense>,
    pub anchor_idx: Vec<usize>,
    pub anchor_dists: Option<Dense>,
}

fn gather_dense(x: &Dense, idx: &[usize]) -> Dense {
    let mut out = Dense::zeros(idx.len(), x.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(x.row(i));
    }
    out
}

impl RunContext {
    pub fn build(ds: &GraphDataset, hp: &HyperParams, variant: Variant) -> Result<Self> {
        ds.validate()?;
        hp.validate()?;
        let a0 = match &ds.a0 {
            Some(a) => a.clone(),
            None => {
                let k = hp.k.ok_or_else(|| {
                    IdglError::InvalidInput("dataset has no graph and no kNN fanout set".into())
                })?;
                knn_graph(&ds.x, k)?
            }
        };
        let l0 = sym_normalize(&a0, true)?;
        let mut ctx = RunContext { l0, dists: None, anchor_idx: Vec::new(), anchor_dists: None };
        match variant {
            Variant::Idgl => {
                if hp.alpha > 0.0 {
                    ctx.dists = Some(pairwise_sq_dists(&ds.x)?);
                }
            }
            Variant::IdglAnch => {
                let n = ds.n();
                if hp.s == 0 || hp.s > n {
                    return Err(IdglError::InvalidInput(format!(
                        "anchor count {} out of 1..={n}",
                        hp.s
                    )));
                }
                let mut rng = stream_rng(hp.seed, STREAM_ANCHORS);
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                idx.truncate(hp.s);
                idx.sort_unstable();
                if hp.alpha > 0.0 {
                    ctx.anchor_dists = Some(pairwise_sq_dists(&gather_dense(&ds.x, &idx))?);
                }
                ctx.anchor_idx = idx;
            }
        }
        Ok(ctx)
    }
}

/// Tape leaves for one forward/backward pass, in optimizer order.
pub struct ParamVars {
    pub heads_feat: MetricHeads,
    pub heads_emb: MetricHeads,
    pub w1: Var,
    pub w2: Var,
}

pub fn lift_params(tape: &mut Tape, p: &IdglParams) -> Result<ParamVars> {
    Ok(ParamVars {
        heads_feat: MetricHeads::new(tape, p.heads_feat.clone())?,
        heads_emb: MetricHeads::new(tape, p.heads_emb.clone())?,
        w1: tape.leaf(p.gcn.w1.clone(), true),
        w2: tape.leaf(p.gcn.w2.clone(), true),
    })
}

/// Scalar diagnostics of one forward pass. `deltas[i]` is the relative
/// squared change of the refined graph between iterations i+1 and i+2.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub iterations_run: usize,
    pub deltas: Vec<f64>,
    pub pred_losses: Vec<f64>,
    pub reg_losses: Vec<f64>,
    pub predictions: Dense,
}

fn frob_sq_diff(a: &Dense, b: &Dense) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn scalar_of(tape: &Tape, v: Var, iteration: usize) -> Result<f64> {
    let x = tape.value(v)[(0, 0)];
    if x.is_finite() {
        Ok(x)
    } else {
        Err(IdglError::Divergence { iteration, epoch: None })
    }
}

fn apply_dropout(
    tape: &mut Tape,
    v: Var,
    rate: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(v);
    }
    let keep = 1.0 - rate;
    let mask = BitMask::from_fn(v.rows(), v.cols(), |_, _| rng.gen::<f64>() < keep);
    let id = tape.register_mask(mask);
    tape.dropout(v, id, keep)
}

/// Two GCN layers over a shared adjacency. Returns the pre-dropout hidden
/// state (fed to the next refinement step) and the output logits.
fn gcn_pair(
    tape: &mut Tape,
    x: Var,
    adj: Adj,
    vars: &ParamVars,
    hp: &HyperParams,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Var)> {
    let z = gcn_layer(tape, x, adj, vars.w1, Activation::Relu, None)?;
    let z_pred = apply_dropout(tape, z, hp.dropout, mode, rng)?;
    let out = gcn_layer(tape, z_pred, adj, vars.w2, Activation::None, None)?;
    Ok((z, out))
}

/// First-iteration loss kept whole, later iterations averaged:
/// total = l[0] + (l[1] + ... + l[t-1]) / (t - 1).
fn aggregate_losses(tape: &mut Tape, per_iter: &[Var]) -> Result<Var> {
    let first = *per_iter.first().ok_or(IdglError::EmptyMask)?;
    if per_iter.len() == 1 {
        return Ok(first);
    }
    let mut rest = per_iter[1];
    for &v in &per_iter[2..] {
        rest = tape.add(rest, v)?;
    }
    let scaled = tape.scale(rest, 1.0 / (per_iter.len() - 1) as f64)?;
    tape.add(first, scaled)
}

fn aggregate_scalars(vals: &[f64]) -> f64 {
    if vals.len() <= 1 {
        return vals.first().copied().unwrap_or(0.0);
    }
    vals[0] + vals[1..].iter().sum::<f64>() / (vals.len() - 1) as f64
}

/// Dense pipeline: refine an n x n graph from node similarities, mix it with
/// the input graph, and rerun the GCN until the refined graph settles or the
/// iteration cap is hit. Returns the aggregated training loss and a trace.
pub fn forward_idgl(
    tape: &mut Tape,
    vars: &ParamVars,
    ds: &GraphDataset,
    ctx: &RunContext,
    hp: &HyperParams,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, ForwardTrace)> {
    let labels = tape.register_indices(ds.y.clone());
    let train_mask = tape.register_indices(ds.train_idx.clone());
    let x = tape.leaf(ds.x.clone(), false);
    let l0_id = tape.register_csr(ctx.l0.clone());
    let dists_id: Option<ConstId> = ctx.dists.as_ref().map(|d| tape.register_const(d.clone()));
    let rw = RegWeights::new(hp.alpha, hp.beta, hp.gamma)?;
    let plain_gcn = hp.lambda_ == 1.0;

    let g1 = learn_graph(tape, x, &vars.heads_feat, hp.eps, Strictness::Guarded)?;
    let a1 = g1.a;
    let adj1 = if plain_gcn {
        Adj::Sparse(l0_id)
    } else {
        Adj::Dense(combine_graphs(tape, l0_id, a1, a1, hp.lambda_, hp.eta)?)
    };
    let (z1, out1) = gcn_pair(tape, x, adj1, vars, hp, mode, rng)?;
    let pred1 = tape.softmax_cross_entropy(out1, labels, train_mask)?;
    let reg1 = graph_reg_loss_cached(tape, a1, dists_id, &rw, Strictness::Guarded)?;

    let mut preds = vec![pred1];
    let mut regs = vec![reg1];
    let mut pred_vals = vec![scalar_of(tape, pred1, 1)?];
    let mut reg_vals = vec![scalar_of(tape, reg1, 1)?];
    let mut deltas = Vec::new();

    let norm_a1 = tape.value(a1).frob_sq();
    let mut a_prev = tape.value(a1).clone();
    let mut z_prev = z1;
    let mut out_final = out1;
    let mut iterations = 1;

    for t in 2..=hp.t_max {
        let z_learn = apply_dropout(tape, z_prev, hp.iter_dropout, mode, rng)?;
        let gt = learn_graph(tape, z_learn, &vars.heads_emb, hp.eps, Strictness::Guarded)?;
        let at = gt.a;
        let adj = if plain_gcn {
            Adj::Sparse(l0_id)
        } else {
            Adj::Dense(combine_graphs(tape, l0_id, at, a1, hp.lambda_, hp.eta)?)
        };
        let (zt, out_t) = gcn_pair(tape, x, adj, vars, hp, mode, rng)?;
        let pred_t = tape.softmax_cross_entropy(out_t, labels, train_mask)?;
        let reg_t = graph_reg_loss_cached(tape, at, dists_id, &rw, Strictness::Guarded)?;
        preds.push(pred_t);
        regs.push(reg_t);
        pred_vals.push(scalar_of(tape, pred_t, t)?);
        reg_vals.push(scalar_of(tape, reg_t, t)?);

        iterations = t;
        let a_cur = tape.value(at);
        let diff = frob_sq_diff(a_cur, &a_prev);
        let cur_norm = a_cur.frob_sq();
        deltas.push(if cur_norm > 0.0 { diff / cur_norm } else { 0.0 });
        a_prev = a_cur.clone();
        z_prev = zt;
        out_final = out_t;
        if diff <= hp.delta * norm_a1 {
            break;
        }
    }

    let total = {
        let p = aggregate_losses(tape, &preds)?;
        let r = aggregate_losses(tape, &regs)?;
        tape.add(p, r)?
    };
    scalar_of(tape, total, iterations)?;
    let trace = ForwardTrace {
        iterations_run: iterations,
        deltas,
        pred_losses: pred_vals,
        reg_losses: reg_vals,
        predictions: tape.value(out_final).clone(),
    };
    Ok((total, trace))
}

/// Anchor pipeline: refine an n x s affinity instead of an n x n graph and
/// message-pass through the anchor factorization. The stopping rule tracks
/// the affinity matrix, normalized by its current scale.
pub fn forward_idgl_anch(
    tape: &mut Tape,
    vars: &ParamVars,
    ds: &GraphDataset,
    ctx: &RunContext,
    hp: &HyperParams,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, ForwardTrace)> {
    if ctx.anchor_idx.is_empty() {
        return Err(IdglError::InvalidInput("anchor context is empty".into()));
    }
    let labels = tape.register_indices(ds.y.clone());
    let train_mask = tape.register_indices(ds.train_idx.clone());
    let x = tape.leaf(ds.x.clone(), false);
    let l0_id = tape.register_csr(ctx.l0.clone());
    let idx_id = tape.register_indices(ctx.anchor_idx.clone());
    let dists_id: Option<ConstId> =
        ctx.anchor_dists.as_ref().map(|d| tape.register_const(d.clone()));
    let rw = RegWeights::new(hp.alpha, hp.beta, hp.gamma)?;
    let plain_gcn = hp.lambda_ == 1.0;

    let anchors1 = tape.gather_rows(x, idx_id)?;
    let aff1 = anchor_affinity(
        tape,
        x,
        anchors1,
        &ctx.anchor_idx,
        &vars.heads_feat,
        hp.eps,
        Strictness::Guarded,
    )?;
    let adj1 = if plain_gcn {
        Adj::Sparse(l0_id)
    } else {
        Adj::Hybrid { l0: l0_id, r_t: &aff1, r_1: &aff1, lambda: hp.lambda_, eta: hp.eta }
    };
    let (z1, out1) = gcn_pair(tape, x, adj1, vars, hp, mode, rng)?;
    let pred1 = tape.softmax_cross_entropy(out1, labels, train_mask)?;
    let reg1 = anchor_reg_loss_cached(tape, &aff1, dists_id, &rw, Strictness::Guarded)?;

    let mut preds = vec![pred1];
    let mut regs = vec![reg1];
    let mut pred_vals = vec![scalar_of(tape, pred1, 1)?];
    let mut reg_vals = vec![scalar_of(tape, reg1, 1)?];
    let mut deltas = Vec::new();

    let mut r_prev = tape.value(aff1.r).clone();
    let mut z_prev = z1;
    let mut out_final = out1;
    let mut iterations = 1;

    for t in 2..=hp.t_max {
        let z_learn = apply_dropout(tape, z_prev, hp.iter_dropout, mode, rng)?;
        let anchors_t = tape.gather_rows(z_learn, idx_id)?;
        let aff_t = anchor_affinity(
            tape,
            z_learn,
            anchors_t,
            &ctx.anchor_idx,
            &vars.heads_emb,
            hp.eps,
            Strictness::Guarded,
        )?;
        let adj = if plain_gcn {
            Adj::Sparse(l0_id)
        } else {
            Adj::Hybrid { l0: l0_id, r_t: &aff_t, r_1: &aff1, lambda: hp.lambda_, eta: hp.eta }
        };
        let (zt, out_t) = gcn_pair(tape, x, adj, vars, hp, mode, rng)?;
        let pred_t = tape.softmax_cross_entropy(out_t, labels, train_mask)?;
        let reg_t = anchor_reg_loss_cached(tape, &aff_t, dists_id, &rw, Strictness::Guarded)?;
        preds.push(pred_t);
        regs.push(reg_t);
        pred_vals.push(scalar_of(tape, pred_t, t)?);
        reg_vals.push(scalar_of(tape, reg_t, t)?);

        iterations = t;
        let r_cur = tape.value(aff_t.r);
        let diff = frob_sq_diff(r_cur, &r_prev);
        let cur_norm = r_cur.frob_sq();
        deltas.push(if cur_norm > 0.0 { diff / cur_norm } else { 0.0 });
        r_prev = r_cur.clone();
        z_prev = zt;
        out_final = out_t;
        if diff <= hp.delta * cur_norm {
            break;
        }
    }

    let total = {
        let p = aggregate_losses(tape, &preds)?;
        let r = aggregate_losses(tape, &regs)?;
        tape.add(p, r)?
    };
    scalar_of(tape, total, iterations)?;
    let trace = ForwardTrace {
        iterations_run: iterations,
        deltas,
        pred_losses: pred_vals,
        reg_losses: reg_vals,
        predictions: tape.value(out_final).clone(),
    };
    Ok((total, trace))
}

/// Fraction of rows in `idx` whose argmax logit matches the label. Ties go
/// to the lower class index.
pub fn accuracy(logits: &Dense, y: &[usize], idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(IdglError::EmptyMask);
    }
    let mut correct = 0usize;
    for &i in idx {
        if i >= logits.rows() || i >= y.len() {
            return Err(IdglError::InvalidInput(format!("index {i} out of range")));
        }
        let row = logits.row(i);
        let mut arg = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[arg] {
                arg = j;
            }
        }
        if arg == y[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// One epoch of the training log. `pred_loss` and `reg_loss` use the same
/// first-plus-mean aggregation as the total.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub pred_loss: f64,
    pub reg_loss: f64,
    pub dev_acc: f64,
    pub iterations_run: usize,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} train_loss={} pred_loss={} reg_loss={} dev_acc={} iterations={}",
            self.epoch,
            self.train_loss,
            self.pred_loss,
            self.reg_loss,
            self.dev_acc,
            self.iterations_run
        )
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: IdglParams,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_acc: f64,
    pub test_acc: f64,
    pub final_trace: ForwardTrace,
    pub wall_secs: f64,
}

impl FitReport {
    pub fn summary_line(&self) -> String {
        format!(
            "summary epochs_run={} best_epoch={} best_dev_acc={} test_acc={} iterations={} wall_secs={:.3}",
            self.epochs.len(),
            self.best_epoch,
            self.best_dev_acc,
            self.test_acc,
            self.final_trace.iterations_run,
            self.wall_secs
        )
    }
}

fn run_forward(
    tape: &mut Tape,
    vars: &ParamVars,
    ds: &GraphDataset,
    ctx: &RunContext,
    hp: &HyperParams,
    variant: Variant,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, ForwardTrace)> {
    match variant {
        Variant::Idgl => forward_idgl(tape, vars, ds, ctx, hp, mode, rng),
        Variant::IdglAnch => forward_idgl_anch(tape, vars, ds, ctx, hp, mode, rng),
    }
}

fn eval_with_ctx(
    params: &IdglParams,
    ds: &GraphDataset,
    ctx: &RunContext,
    hp: &HyperParams,
    variant: Variant,
    idx: &[usize],
) -> Result<(f64, ForwardTrace)> {
    let mut tape = Tape::new();
    let vars = lift_params(&mut tape, params)?;
    let mut rng = stream_rng(hp.seed, STREAM_DROPOUT);
    let (_, trace) = run_forward(&mut tape, &vars, ds, ctx, hp, variant, Mode::Eval, &mut rng)?;
    let acc = accuracy(&trace.predictions, &ds.y, idx)?;
    Ok((acc, trace))
}

/// Dynamic-stopping inference on the test split with a context rebuilt from
/// the run seed, so anchors and any kNN graph match the training run.
pub fn evaluate(
    params: &IdglParams,
    ds: &GraphDataset,
    hp: &HyperParams,
    variant: Variant,
) -> Result<(f64, ForwardTrace)> {
    let ctx = RunContext::build(ds, hp, variant)?;
    eval_with_ctx(params, ds, &ctx, hp, variant, &ds.test_idx)
}

fn collect_grads(tape: &Tape, vars: &ParamVars, shapes: &[(usize, usize)]) -> Vec<Dense> {
    [vars.heads_feat.w, vars.heads_emb.w, vars.w1, vars.w2]
        .iter()
        .zip(shapes)
        .map(|(&v, &(r, c))| tape.grad(v).cloned().unwrap_or_else(|| Dense::zeros(r, c)))
        .collect()
}

fn with_epoch(e: IdglError, epoch: usize) -> IdglError {
    match e {
        IdglError::Divergence { iteration, .. } => {
            IdglError::Divergence { iteration, epoch: Some(epoch) }
        }
        other => other,
    }
}

/// Mean cross-entropy of the given rows, for ranking checkpoints whose dev
/// accuracies are tied (small dev sets saturate accuracy early).
fn masked_cross_entropy(logits: &Dense, y: &[usize], idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(IdglError::EmptyMask);
    }
    let mut loss = 0.0;
    for &i in idx {
        let row = logits.row(i);
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
        loss += z.ln() + mx - row[y[i]];
    }
    Ok(loss / idx.len() as f64)
}

/// Full-batch transductive training. Each epoch runs one forward/backward
/// pass, one Adam step, then a dev evaluation in inference mode; the
/// best-dev parameters are retained and early stopping fires after
/// `patience` epochs without improvement.
pub fn fit(ds: &GraphDataset, hp: &HyperParams, variant: Variant) -> Result<FitReport> {
    let start = Instant::now();
    let ctx = RunContext::build(ds, hp, variant)?;
    if ds.train_idx.is_empty() || ds.dev_idx.is_empty() || ds.test_idx.is_empty() {
        return Err(IdglError::InvalidInput("transductive training needs all three splits".into()));
    }
    let mut params = IdglParams::init(ds.dim(), hp.hidden, ds.n_classes, hp.m, hp.seed)?;
    let shapes = params.shapes();
    let mut adam = AdamState::new(&shapes);
    let mut dropout_rng = stream_rng(hp.seed, STREAM_DROPOUT);

    let mut records: Vec<EpochRecord> = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_loss = f64::INFINITY;
    let mut best_params = params.clone();

    for epoch in 1..=hp.epochs {
        let grads;
        let train_loss;
        let trace;
        {
            let mut tape = Tape::new();
            let vars = lift_params(&mut tape, &params)?;
            let (loss, tr) = run_forward(
                &mut tape,
                &vars,
                ds,
                &ctx,
                hp,
                variant,
                Mode::Train,
                &mut dropout_rng,
            )
            .map_err(|e| with_epoch(e, epoch))?;
            train_loss = tape.value(loss)[(0, 0)];
            tape.backward(loss)?;
            grads = collect_grads(&tape, &vars, &shapes);
            trace = tr;
        }
        {
            let IdglParams { heads_feat, heads_emb, gcn } = &mut params;
            let mut refs = [heads_feat, heads_emb, &mut gcn.w1, &mut gcn.w2];
            adam_step(&mut refs, &grads, &mut adam, hp.lr, hp.weight_decay)?;
        }
        let (dev_acc, dev_trace) = eval_with_ctx(&params, ds, &ctx, hp, variant, &ds.dev_idx)
            .map_err(|e| with_epoch(e, epoch))?;
        let dev_loss = masked_cross_entropy(&dev_trace.predictions, &ds.y, &ds.dev_idx)?;
        records.push(EpochRecord {
            epoch,
            train_loss,
            pred_loss: aggregate_scalars(&trace.pred_losses),
            reg_loss: aggregate_scalars(&trace.reg_losses),
            dev_acc,
            iterations_run: trace.iterations_run,
        });
        if dev_acc > best_acc || (dev_acc == best_acc && dev_loss < best_loss) {
            best_acc = dev_acc;
            best_loss = dev_loss;
            best_epoch = epoch;
            best_params = params.clone();
        }
        if epoch - best_epoch >= hp.patience {
            break;
        }
    }

    let (test_acc, final_trace) =
        eval_with_ctx(&best_params, ds, &ctx, hp, variant, &ds.test_idx)?;
    Ok(FitReport {
        params: best_params,
        epochs: records,
        best_epoch,
        best_dev_acc: best_acc,
        test_acc,
        final_trace,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// One whole-graph sample for inductive training: the dense pipeline runs
/// per graph and a mean-pooled logit row feeds the cross-entropy.
struct InductiveCtx {
    l0: CsrSparse,
    dists: Option<Dense>,
}

fn inductive_ctx(ds: &GraphDataset, hp: &HyperParams) -> Result<InductiveCtx> {
    if ds.y.len() != 1 || ds.y[0] >= ds.n_classes {
        return Err(IdglError::InvalidInput("inductive graphs carry one graph label".into()));
    }
    if !ds.x.is_finite() {
        return Err(IdglError::NonFinite("inductive graph features"));
    }
    let k = hp.k.ok_or_else(|| {
        IdglError::InvalidInput("inductive graphs need a kNN fanout".into())
    })?;
    let l0 = sym_normalize(&knn_graph(&ds.x, k)?, true)?;
    let dists = if hp.alpha > 0.0 { Some(pairwise_sq_dists(&ds.x)?) } else { None };
    Ok(InductiveCtx { l0, dists })
}

/// Graph-level loss for one sample: the usual refinement loop with the
/// masked node cross-entropy replaced by cross-entropy on mean-pooled logits.
fn forward_inductive_graph(
    tape: &mut Tape,
    vars: &ParamVars,
    ds: &GraphDataset,
    ctx: &InductiveCtx,
    hp: &HyperParams,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Dense)> {
    let labels = tape.register_indices(ds.y.clone());
    let mask = tape.register_indices(vec![0]);
    let x = tape.leaf(ds.x.clone(), false);
    let l0_id = tape.register_csr(ctx.l0.clone());
    let dists_id: Option<ConstId> = ctx.dists.as_ref().map(|d| tape.register_const(d.clone()));
    let rw = RegWeights::new(hp.alpha, hp.beta, hp.gamma)?;
    let plain_gcn = hp.lambda_ == 1.0;

    let g1 = learn_graph(tape, x, &vars.heads_feat, hp.eps, Strictness::Guarded)?;
    let a1 = g1.a;
    let adj1 = if plain_gcn {
        Adj::Sparse(l0_id)
    } else {
        Adj::Dense(combine_graphs(tape, l0_id, a1, a1, hp.lambda_, hp.eta)?)
    };
    let (z1, out1) = gcn_pair(tape, x, adj1, vars, hp, mode, rng)?;
    let pooled1 = tape.mean_pool_rows(out1)?;
    let pred1 = tape.softmax_cross_entropy(pooled1, labels, mask)?;
    let reg1 = graph_reg_loss_cached(tape, a1, dists_id, &rw, Strictness::Guarded)?;
    let mut losses = vec![tape.add(pred1, reg1)?];
    scalar_of(tape, losses[0], 1)?;

    let norm_a1 = tape.value(a1).frob_sq();
    let mut a_prev = tape.value(a1).clone();
    let mut z_prev = z1;
    let mut pooled_final = pooled1;

    for t in 2..=hp.t_max {
        let z_learn = apply_dropout(tape, z_prev, hp.iter_dropout, mode, rng)?;
        let gt = learn_graph(tape, z_learn, &vars.heads_emb, hp.eps, Strictness::Guarded)?;
        let at = gt.a;
        let adj = if plain_gcn {
            Adj::Sparse(l0_id)
        } else {
            Adj::Dense(combine_graphs(tape, l0_id, at, a1, hp.lambda_, hp.eta)?)
        };
        let (zt, out_t) = gcn_pair(tape, x, adj, vars, hp, mode, rng)?;
        let pooled_t = tape.mean_pool_rows(out_t)?;
        let pred_t = tape.softmax_cross_entropy(pooled_t, labels, mask)?;
        let reg_t = graph_reg_loss_cached(tape, at, dists_id, &rw, Strictness::Guarded)?;
        losses.push(tape.add(pred_t, reg_t)?);
        scalar_of(tape, *losses.last().unwrap(), t)?;

        let a_cur = tape.value(at);
        let diff = frob_sq_diff(a_cur, &a_prev);
        a_prev = a_cur.clone();
        z_prev = zt;
        pooled_final = pooled_t;
        if diff <= hp.delta * norm_a1 {
            break;
        }
    }

    let total = aggregate_losses(tape, &losses)?;
    Ok((total, tape.value(pooled_final).clone()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InductiveEpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_acc: f64,
}

#[derive(Debug, Clone)]
pub struct InductiveReport {
    pub params: IdglParams,
    pub epochs: Vec<InductiveEpochRecord>,
    pub best_epoch: usize,
    pub best_dev_acc: f64,
    pub test_acc: f64,
    pub wall_secs: f64,
}

const INDUCTIVE_BATCH: usize = 16;

fn inductive_accuracy(
    params: &IdglParams,
    graphs: &[GraphDataset],
    ctxs: &[InductiveCtx],
    hp: &HyperParams,
) -> Result<f64> {
    let mut correct = 0usize;
    for (ds, ctx) in graphs.iter().zip(ctxs) {
        let mut tape = Tape::new();
        let vars = lift_params(&mut tape, params)?;
        let mut rng = stream_rng(hp.seed, STREAM_DROPOUT);
        let (_, pooled) =
            forward_inductive_graph(&mut tape, &vars, ds, ctx, hp, Mode::Eval, &mut rng)?;
        if accuracy(&pooled, &[ds.y[0]], &[0])? == 1.0 {
            correct += 1;
        }
    }
    Ok(correct as f64 / graphs.len().max(1) as f64)
}

/// Mini-batch training over whole graphs (dense variant). Batches are fixed
/// contiguous chunks so runs with the same seed replay exactly.
pub fn fit_inductive(
    train: &[GraphDataset],
    dev: &[GraphDataset],
    test: &[GraphDataset],
    hp: &HyperParams,
) -> Result<InductiveReport> {
    let start = Instant::now();
    hp.validate()?;
    if train.is_empty() || dev.is_empty() || test.is_empty() {
        return Err(IdglError::InvalidInput("need train, dev, and test graphs".into()));
    }
    let d = train[0].dim();
    let n_classes = train[0].n_classes;
    for ds in train.iter().chain(dev).chain(test) {
        if ds.dim() != d || ds.n_classes != n_classes {
            return Err(IdglError::InvalidInput("graphs disagree on shape or classes".into()));
        }
    }
    let train_ctx: Vec<InductiveCtx> =
        train.iter().map(|g| inductive_ctx(g, hp)).collect::<Result<_>>()?;
    let dev_ctx: Vec<InductiveCtx> =
        dev.iter().map(|g| inductive_ctx(g, hp)).collect::<Result<_>>()?;
    let test_ctx: Vec<InductiveCtx> =
        test.iter().map(|g| inductive_ctx(g, hp)).collect::<Result<_>>()?;

    let mut params = IdglParams::init(d, hp.hidden, n_classes, hp.m, hp.seed)?;
    let shapes = params.shapes();
    let mut adam = AdamState::new(&shapes);
    let mut dropout_rng = stream_rng(hp.seed, STREAM_DROPOUT);

    let mut records = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_params = params.clone();

    for epoch in 1..=hp.epochs {
        let mut epoch_loss = 0.0;
        for (batch, batch_ctx) in
            train.chunks(INDUCTIVE_BATCH).zip(train_ctx.chunks(INDUCTIVE_BATCH))
        {
            let grads;
            let batch_loss;
            {
                let mut tape = Tape::new();
                let vars = lift_params(&mut tape, &params)?;
                let mut per_graph = Vec::with_capacity(batch.len());
                for (ds, ctx) in batch.iter().zip(batch_ctx) {
                    let (loss, _) = forward_inductive_graph(
                        &mut tape,
                        &vars,
                        ds,
                        ctx,
                        hp,
                        Mode::Train,
                        &mut dropout_rng,
                    )
                    .map_err(|e| with_epoch(e, epoch))?;
                    per_graph.push(loss);
                }
                let mut total = per_graph[0];
                for &l in &per_graph[1..] {
                    total = tape.add(total, l)?;
                }
                let mean = tape.scale(total, 1.0 / per_graph.len() as f64)?;
                batch_loss = tape.value(mean)[(0, 0)];
                tape.backward(mean)?;
                grads = collect_grads(&tape, &vars, &shapes);
            }
            epoch_loss += batch_loss * batch.len() as f64;
            let IdglParams { heads_feat, heads_emb, gcn } = &mut params;
            let mut refs = [heads_feat, heads_emb, &mut gcn.w1, &mut gcn.w2];
            adam_step(&mut refs, &grads, &mut adam, hp.lr, hp.weight_decay)?;
        }
        let dev_acc = inductive_accuracy(&params, dev, &dev_ctx, hp)?;
        records.push(InductiveEpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            dev_acc,
        });
        if dev_acc > best_acc {
            best_acc = dev_acc;
            best_epoch = epoch;
            best_params = params.clone();
        }
        if epoch - best_epoch >= hp.patience {
            break;
        }
    }

    let test_acc = inductive_accuracy(&best_params, test, &test_ctx, hp)?;
    Ok(InductiveReport {
        params: best_params,
        epochs: records,
        best_epoch,
        best_dev_acc: best_acc,
        test_acc,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}
