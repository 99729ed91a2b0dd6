//! The tape records every operation of one forward pass eagerly (values are
//! computed at recording time) and differentiates the whole unrolled graph in
//! a single reverse sweep. All iterations of the graph-learning loop live on
//! one tape, so gradients reach parameters through every iteration, including
//! the first-iteration adjacency that is mixed into all later ones.
//!
//! Discrete decisions (epsilon masks, ReLU cutoffs, dropout, dynamic
//! stopping) are constants with respect to the gradient: masks are stored as
//! bitsets and stopping comparisons happen outside the tape on detached
//! values.

use crate::error::{IdglError, Result};
use crate::linalg::{kernels, CsrSparse, Dense};

/// Guard added to norms and degree reciprocals inside the training loop.
pub(crate) const RECIP_GUARD: f64 = 1e-12;

/// Handle to a tape node. Carries the value shape so downstream shape checks
/// do not need tape access.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    #[inline]
    pub fn id(&self) -> usize {
        self.id
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Handle to a sparse matrix registered on the tape (non-differentiable).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsrId(usize);

/// Handle to a constant dense matrix (non-differentiable).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConstId(usize);

/// Handle to a registered bitmask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskId(usize);

/// Handle to a registered index list (labels, node subsets, anchor ids).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdxId(usize);

/// Dense bitmask with one bit per matrix entry.
#[derive(Clone, Debug)]
pub struct BitMask {
    rows: usize,
    cols: usize,
    words: Vec<u64>,
}

impl BitMask {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut words = vec![0u64; (rows * cols).div_ceil(64)];
        for i in 0..rows {
            for j in 0..cols {
                if f(i, j) {
                    let bit = i * cols + j;
                    words[bit / 64] |= 1 << (bit % 64);
                }
            }
        }
        BitMask { rows, cols, words }
    }

    /// Keeps entries `>= eps`.
    pub fn from_threshold(m: &Dense, eps: f64) -> Self {
        BitMask::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] >= eps)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        let bit = i * self.cols + j;
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Returns `m` with masked-off entries set to zero.
    pub fn apply(&self, m: &Dense) -> Dense {
        let mut out = m.clone();
        self.apply_in_place(&mut out);
        out
    }

    pub fn apply_in_place(&self, m: &mut Dense) {
        debug_assert_eq!(m.shape(), (self.rows, self.cols));
        for i in 0..self.rows {
            for j in 0..self.cols {
                if !self.get(i, j) {
                    m[(i, j)] = 0.0;
                }
            }
        }
    }
}

/// Operation label, used by the gradient checker for reporting and by the
/// fault-injection hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Scale,
    Hadamard,
    Square,
    Relu,
    LogGuard,
    Sum,
    Mean,
    FrobSq,
    MulConst,
    MaskConst,
    Matmul,
    MatmulTn,
    Spmm,
    AddSparseScaled,
    RowNormalize,
    RowSums,
    ColSums,
    Recip,
    RowScale,
    GatherRows,
    MeanPoolRows,
    Dropout,
    SoftmaxCrossEntropy,
    MultiheadCosine,
    AnchorCosine,
    CombineGraphs,
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Hadamard { a: usize, b: usize },
    Square { a: usize },
    Relu { a: usize },
    LogGuard { a: usize, guard: f64 },
    Sum { a: usize },
    Mean { a: usize },
    FrobSq { a: usize },
    MulConst { a: usize, k: ConstId },
    MaskConst { a: usize, mask: MaskId },
    Matmul { a: usize, b: usize },
    MatmulTn { a: usize, b: usize },
    Spmm { s: CsrId, b: usize },
    AddSparseScaled { a: usize },
    RowNormalize { a: usize },
    RowSums { a: usize },
    ColSums { a: usize },
    Recip { a: usize },
    RowScale { a: usize, v: usize },
    GatherRows { a: usize, idx: IdxId },
    MeanPoolRows { a: usize },
    Dropout { a: usize, mask: MaskId, keep: f64 },
    SoftmaxCrossEntropy { logits: usize, labels: IdxId, mask: IdxId },
    MultiheadCosine { v: usize, w: usize },
    AnchorCosine { v: usize, u: usize, w: usize },
    CombineGraphs { a_t: usize, a_1: usize, lambda_: f64, eta: f64 },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Scale { .. } => OpKind::Scale,
            Op::Hadamard { .. } => OpKind::Hadamard,
            Op::Square { .. } => OpKind::Square,
            Op::Relu { .. } => OpKind::Relu,
            Op::LogGuard { .. } => OpKind::LogGuard,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::FrobSq { .. } => OpKind::FrobSq,
            Op::MulConst { .. } => OpKind::MulConst,
            Op::MaskConst { .. } => OpKind::MaskConst,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::MatmulTn { .. } => OpKind::MatmulTn,
            Op::Spmm { .. } => OpKind::Spmm,
            Op::AddSparseScaled { .. } => OpKind::AddSparseScaled,
            Op::RowNormalize { .. } => OpKind::RowNormalize,
            Op::RowSums { .. } => OpKind::RowSums,
            Op::ColSums { .. } => OpKind::ColSums,
            Op::Recip { .. } => OpKind::Recip,
            Op::RowScale { .. } => OpKind::RowScale,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::MeanPoolRows { .. } => OpKind::MeanPoolRows,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::MultiheadCosine { .. } => OpKind::MultiheadCosine,
            Op::AnchorCosine { .. } => OpKind::AnchorCosine,
            Op::CombineGraphs { .. } => OpKind::CombineGraphs,
        }
    }
}

struct Node {
    op: Op,
    value: Dense,
    grad: Option<Dense>,
    requires_grad: bool,
    /// Auxiliary forward results needed by the backward rule (saved norms,
    /// normalized factors, softmax rows, row sums).
    saved: Vec<Dense>,
}

/// Recording tape. One tape owns one forward pass; `backward` may run once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    csrs: Vec<CsrSparse>,
    consts: Vec<Dense>,
    masks: Vec<BitMask>,
    indices: Vec<Vec<usize>>,
    backward_done: bool,
    fault: Option<(OpKind, f64)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales every gradient contribution produced by `kind`'s backward rule,
    /// corrupting it on purpose. Test hook for verifying that the gradient
    /// checker actually catches broken backward rules.
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    pub fn register_csr(&mut self, s: CsrSparse) -> CsrId {
        self.csrs.push(s);
        CsrId(self.csrs.len() - 1)
    }

    pub fn csr(&self, id: CsrId) -> &CsrSparse {
        &self.csrs[id.0]
    }

    pub fn register_const(&mut self, d: Dense) -> ConstId {
        self.consts.push(d);
        ConstId(self.consts.len() - 1)
    }

    pub fn register_mask(&mut self, m: BitMask) -> MaskId {
        self.masks.push(m);
        MaskId(self.masks.len() - 1)
    }

    pub fn mask(&self, id: MaskId) -> &BitMask {
        &self.masks[id.0]
    }

    pub fn register_indices(&mut self, v: Vec<usize>) -> IdxId {
        self.indices.push(v);
        IdxId(self.indices.len() - 1)
    }

    pub fn indices(&self, id: IdxId) -> &[usize] {
        &self.indices[id.0]
    }

    pub fn value(&self, v: Var) -> &Dense {
        &self.nodes[v.id].value
    }

    /// Gradient of a leaf after `backward`. Non-leaf gradients are freed
    /// during the sweep.
    pub fn grad(&self, v: Var) -> Option<&Dense> {
        self.nodes[v.id].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Dense, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad, Vec::new())
    }

    pub fn constant(&mut self, value: Dense) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, value: Dense, requires_grad: bool, saved: Vec<Dense>) -> Var {
        let id = self.nodes.len();
        let (rows, cols) = value.shape();
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
            saved,
        });
        Var { id, rows, cols }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn val(&self, id: usize) -> &Dense {
        &self.nodes[id].value
    }
}

/// Forward operations. Each records a node eagerly and validates shapes.
impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(IdglError::dims("add", a.shape(), b.shape()));
        }
        let value = self.val(a.id).zip_map(self.val(b.id), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add { a: a.id, b: b.id }, value, rg, Vec::new()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(IdglError::dims("sub", a.shape(), b.shape()));
        }
        let value = self.val(a.id).zip_map(self.val(b.id), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub { a: a.id, b: b.id }, value, rg, Vec::new()))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.val(a.id).map(|x| c * x);
        let rg = self.rg(a);
        Ok(self.push(Op::Scale { a: a.id, c }, value, rg, Vec::new()))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(IdglError::dims("hadamard", a.shape(), b.shape()));
        }
        let value = self.val(a.id).zip_map(self.val(b.id), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Hadamard { a: a.id, b: b.id }, value, rg, Vec::new()))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.val(a.id).map(|x| x * x);
        let rg = self.rg(a);
        Ok(self.push(Op::Square { a: a.id }, value, rg, Vec::new()))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.val(a.id).map(|x| x.max(0.0));
        let rg = self.rg(a);
        Ok(self.push(Op::Relu { a: a.id }, value, rg, Vec::new()))
    }

    /// `ln(a + guard)` elementwise. Callers that need the strict log domain
    /// check it before recording (see the regularization module).
    pub fn log_guard(&mut self, a: Var, guard: f64) -> Result<Var> {
        let value = self.val(a.id).map(|x| (x + guard).ln());
        let rg = self.rg(a);
        Ok(self.push(Op::LogGuard { a: a.id, guard }, value, rg, Vec::new()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Dense::scalar(self.val(a.id).sum());
        let rg = self.rg(a);
        Ok(self.push(Op::Sum { a: a.id }, value, rg, Vec::new()))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a.id);
        if v.is_empty() {
            return Err(IdglError::InvalidInput("mean of empty matrix".into()));
        }
        let value = Dense::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(a);
        Ok(self.push(Op::Mean { a: a.id }, value, rg, Vec::new()))
    }

    pub fn frob_sq(&mut self, a: Var) -> Result<Var> {
        let value = Dense::scalar(self.val(a.id).frob_sq());
        let rg = self.rg(a);
        Ok(self.push(Op::FrobSq { a: a.id }, value, rg, Vec::new()))
    }

    /// Elementwise product with a registered constant.
    pub fn mul_const(&mut self, a: Var, k: ConstId) -> Result<Var> {
        if self.consts[k.0].shape() != a.shape() {
            return Err(IdglError::dims("mul_const", a.shape(), self.consts[k.0].shape()));
        }
        let value = self.val(a.id).zip_map(&self.consts[k.0], |x, y| x * y)?;
        let rg = self.rg(a);
        Ok(self.push(Op::MulConst { a: a.id, k }, value, rg, Vec::new()))
    }

    /// Zeroes all entries outside the mask; the mask is constant w.r.t. the
    /// gradient.
    pub fn mask_const(&mut self, a: Var, mask: MaskId) -> Result<Var> {
        if self.masks[mask.0].shape() != a.shape() {
            return Err(IdglError::dims("mask_const", a.shape(), self.masks[mask.0].shape()));
        }
        let value = self.masks[mask.0].apply(self.val(a.id));
        let rg = self.rg(a);
        Ok(self.push(Op::MaskConst { a: a.id, mask }, value, rg, Vec::new()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.val(a.id), self.val(b.id))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Matmul { a: a.id, b: b.id }, value, rg, Vec::new()))
    }

    /// `a^T * b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul_tn(self.val(a.id), self.val(b.id))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatmulTn { a: a.id, b: b.id }, value, rg, Vec::new()))
    }

    /// Sparse-dense product; the sparse operand is non-differentiable.
    pub fn spmm(&mut self, s: CsrId, b: Var) -> Result<Var> {
        let value = self.csrs[s.0].spmm(self.val(b.id))?;
        let rg = self.rg(b);
        Ok(self.push(Op::Spmm { s, b: b.id }, value, rg, Vec::new()))
    }

    /// `a + c * S` with sparse constant `S`.
    pub fn add_sparse_scaled(&mut self, a: Var, s: CsrId, c: f64) -> Result<Var> {
        if self.csrs[s.0].shape() != a.shape() {
            return Err(IdglError::dims("add_sparse_scaled", a.shape(), self.csrs[s.0].shape()));
        }
        let mut value = self.val(a.id).clone();
        for (i, j, v) in self.csrs[s.0].iter() {
            value[(i, j)] += c * v;
        }
        let rg = self.rg(a);
        Ok(self.push(Op::AddSparseScaled { a: a.id }, value, rg, Vec::new()))
    }

    /// Divides each row by its sum. With `safe` a zero-sum row stays zero;
    /// otherwise it is an error. Requires non-negative entries.
    pub fn row_normalize(&mut self, a: Var, safe: bool) -> Result<Var> {
        let v = self.val(a.id);
        let sums = v.row_sums();
        if !safe {
            if let Some(i) = sums.iter().position(|&s| s == 0.0) {
                return Err(IdglError::DegenerateRow(i));
            }
        }
        let mut value = v.clone();
        for (i, &s) in sums.iter().enumerate() {
            if s != 0.0 {
                for x in value.row_mut(i) {
                    *x /= s;
                }
            }
        }
        let saved = vec![Dense::from_vec(a.rows, 1, sums)?];
        let rg = self.rg(a);
        Ok(self.push(Op::RowNormalize { a: a.id }, value, rg, saved))
    }

    /// Column vector of row sums (n x 1).
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let value = Dense::from_vec(a.rows, 1, self.val(a.id).row_sums())?;
        let rg = self.rg(a);
        Ok(self.push(Op::RowSums { a: a.id }, value, rg, Vec::new()))
    }

    /// Column vector of column sums (cols x 1).
    pub fn col_sums(&mut self, a: Var) -> Result<Var> {
        let value = Dense::from_vec(a.cols, 1, self.val(a.id).col_sums())?;
        let rg = self.rg(a);
        Ok(self.push(Op::ColSums { a: a.id }, value, rg, Vec::new()))
    }

    /// `1 / (a + guard)` elementwise.
    pub fn recip(&mut self, a: Var, guard: f64) -> Result<Var> {
        let value = self.val(a.id).map(|x| 1.0 / (x + guard));
        let rg = self.rg(a);
        Ok(self.push(Op::Recip { a: a.id }, value, rg, Vec::new()))
    }

    /// Scales row i of `a` by `v[i]`; `v` must be (rows x 1).
    pub fn row_scale(&mut self, a: Var, v: Var) -> Result<Var> {
        if v.shape() != (a.rows, 1) {
            return Err(IdglError::dims("row_scale", a.shape(), v.shape()));
        }
        let mut value = self.val(a.id).clone();
        for i in 0..a.rows {
            let s = self.nodes[v.id].value[(i, 0)];
            for x in value.row_mut(i) {
                *x *= s;
            }
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(Op::RowScale { a: a.id, v: v.id }, value, rg, Vec::new()))
    }

    /// Selects rows of `a` by index (with possible repetition).
    pub fn gather_rows(&mut self, a: Var, idx: IdxId) -> Result<Var> {
        let ids = &self.indices[idx.0];
        if let Some(&bad) = ids.iter().find(|&&i| i >= a.rows) {
            return Err(IdglError::InvalidInput(format!(
                "gather index {bad} out of range for {} rows",
                a.rows
            )));
        }
        let mut value = Dense::zeros(ids.len(), a.cols);
        for (r, &i) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(self.nodes[a.id].value.row(i));
        }
        let rg = self.rg(a);
        Ok(self.push(Op::GatherRows { a: a.id, idx }, value, rg, Vec::new()))
    }

    /// Column-wise mean over rows, (1 x cols). Graph-level readout.
    pub fn mean_pool_rows(&mut self, a: Var) -> Result<Var> {
        if a.rows == 0 {
            return Err(IdglError::InvalidInput("mean pool of empty matrix".into()));
        }
        let sums = self.val(a.id).col_sums();
        let n = a.rows as f64;
        let value = Dense::from_vec(1, a.cols, sums.into_iter().map(|s| s / n).collect())?;
        let rg = self.rg(a);
        Ok(self.push(Op::MeanPoolRows { a: a.id }, value, rg, Vec::new()))
    }

    /// Inverted dropout: zero where the mask is off, scale survivors by
    /// `1/keep`. The caller samples the mask (evaluation mode simply skips
    /// recording this op).
    pub fn dropout(&mut self, a: Var, mask: MaskId, keep: f64) -> Result<Var> {
        if self.masks[mask.0].shape() != a.shape() {
            return Err(IdglError::dims("dropout", a.shape(), self.masks[mask.0].shape()));
        }
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(IdglError::InvalidInput(format!("keep probability {keep} out of (0,1]")));
        }
        let mut value = self.masks[mask.0].apply(self.val(a.id));
        value.scale_in_place(1.0 / keep);
        let rg = self.rg(a);
        Ok(self.push(Op::Dropout { a: a.id, mask, keep }, value, rg, Vec::new()))
    }

    /// Mean over the masked rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: IdxId, mask: IdxId) -> Result<Var> {
        let n_classes = logits.cols;
        let label_ids = &self.indices[labels.0];
        let mask_ids = &self.indices[mask.0];
        if mask_ids.is_empty() {
            return Err(IdglError::EmptyMask);
        }
        if label_ids.len() != logits.rows {
            return Err(IdglError::InvalidInput(format!(
                "{} labels for {} logit rows",
                label_ids.len(),
                logits.rows
            )));
        }
        for &i in mask_ids {
            if i >= logits.rows {
                return Err(IdglError::InvalidInput(format!("mask index {i} out of range")));
            }
            if label_ids[i] >= n_classes {
                return Err(IdglError::InvalidInput(format!(
                    "label {} out of range for {} classes",
                    label_ids[i], n_classes
                )));
            }
        }
        let mut softmax = Dense::zeros(mask_ids.len(), n_classes);
        let mut loss = 0.0;
        for (pos, &i) in mask_ids.iter().enumerate() {
            let row = self.nodes[logits.id].value.row(i);
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut z = 0.0;
            for (o, &x) in softmax.row_mut(pos).iter_mut().zip(row) {
                *o = (x - mx).exp();
                z += *o;
            }
            for o in softmax.row_mut(pos) {
                *o /= z;
            }
            loss += z.ln() + mx - row[label_ids[i]];
        }
        loss /= mask_ids.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits: logits.id, labels, mask },
            Dense::scalar(loss),
            rg,
            vec![softmax],
        ))
    }

    /// Multi-head weighted cosine similarity: the (i, j) output is the mean
    /// over heads p of `cos(w_p ⊙ v_i, w_p ⊙ v_j)`. Zero-norm weighted rows
    /// are guarded (their similarities become 0); strict checking happens at
    /// the graph_learner boundary.
    pub fn multihead_cosine(&mut self, v: Var, w: Var) -> Result<Var> {
        if v.cols != w.cols || w.rows == 0 {
            return Err(IdglError::dims("multihead_cosine", v.shape(), w.shape()));
        }
        let (n, m) = (v.rows, w.rows);
        let mut saved = Vec::with_capacity(m + 1);
        let mut norms = Dense::zeros(n, m);
        let mut acc: Option<Dense> = None;
        for p in 0..m {
            let vhat = weighted_normalize(self.val(v.id), self.val(w.id).row(p), p, &mut norms);
            let gram = kernels::matmul_nt(&vhat, &vhat)?;
            match &mut acc {
                Some(s) => s.add_scaled_in_place(&gram, 1.0)?,
                slot => *slot = Some(gram),
            }
            saved.push(vhat);
        }
        let mut value = acc.expect("m >= 1");
        value.scale_in_place(1.0 / m as f64);
        saved.push(norms);
        let rg = self.rg(v) || self.rg(w);
        Ok(self.push(Op::MultiheadCosine { v: v.id, w: w.id }, value, rg, saved))
    }

    /// Node-anchor affinity: same metric as `multihead_cosine` but between
    /// node vectors `v` (n x d) and anchor vectors `u` (s x d), giving n x s.
    pub fn anchor_cosine(&mut self, v: Var, u: Var, w: Var) -> Result<Var> {
        if v.cols != w.cols || u.cols != v.cols || w.rows == 0 {
            return Err(IdglError::dims("anchor_cosine", v.shape(), w.shape()));
        }
        let (n, s, m) = (v.rows, u.rows, w.rows);
        let mut saved = Vec::with_capacity(2 * m + 2);
        let mut vnorms = Dense::zeros(n, m);
        let mut unorms = Dense::zeros(s, m);
        let mut acc: Option<Dense> = None;
        for p in 0..m {
            let vhat = weighted_normalize(self.val(v.id), self.val(w.id).row(p), p, &mut vnorms);
            let uhat = weighted_normalize(self.val(u.id), self.val(w.id).row(p), p, &mut unorms);
            let prod = kernels::matmul_nt(&vhat, &uhat)?;
            match &mut acc {
                Some(r) => r.add_scaled_in_place(&prod, 1.0)?,
                slot => *slot = Some(prod),
            }
            saved.push(vhat);
            saved.push(uhat);
        }
        let mut value = acc.expect("m >= 1");
        value.scale_in_place(1.0 / m as f64);
        saved.push(vnorms);
        saved.push(unorms);
        let rg = self.rg(v) || self.rg(u) || self.rg(w);
        Ok(self.push(Op::AnchorCosine { v: v.id, u: u.id, w: w.id }, value, rg, saved))
    }

    /// Fused Eq.-3 mixing: `λ·L0 + (1−λ)·[η·rownorm(a_t) + (1−η)·rownorm(a_1)]`
    /// with safe row normalization. Fusing keeps one n x n output per
    /// iteration instead of four.
    pub fn combine_graphs(&mut self, a_t: Var, a_1: Var, l0: CsrId, lambda_: f64, eta: f64) -> Result<Var> {
        if a_t.shape() != a_1.shape() {
            return Err(IdglError::dims("combine_graphs", a_t.shape(), a_1.shape()));
        }
        if self.csrs[l0.0].shape() != a_t.shape() {
            return Err(IdglError::dims("combine_graphs", a_t.shape(), self.csrs[l0.0].shape()));
        }
        if !(0.0..=1.0).contains(&lambda_) || !(0.0..=1.0).contains(&eta) {
            return Err(IdglError::InvalidInput(format!(
                "mixing weights must lie in [0,1]: lambda={lambda_}, eta={eta}"
            )));
        }
        let (n, _) = a_t.shape();
        let c_t = (1.0 - lambda_) * eta;
        let c_1 = (1.0 - lambda_) * (1.0 - eta);
        let rt = self.val(a_t.id).row_sums();
        let r1 = self.val(a_1.id).row_sums();
        let mut value = Dense::zeros(n, n);
        for i in 0..n {
            let out = value.row_mut(i);
            if c_t != 0.0 && rt[i] != 0.0 {
                let f = c_t / rt[i];
                for (o, &x) in out.iter_mut().zip(self.nodes[a_t.id].value.row(i)) {
                    *o += f * x;
                }
            }
            if c_1 != 0.0 && r1[i] != 0.0 {
                let f = c_1 / r1[i];
                for (o, &x) in out.iter_mut().zip(self.nodes[a_1.id].value.row(i)) {
                    *o += f * x;
                }
            }
        }
        if lambda_ != 0.0 {
            for (i, j, x) in self.csrs[l0.0].iter() {
                value[(i, j)] += lambda_ * x;
            }
        }
        let saved = vec![Dense::from_vec(n, 1, rt)?, Dense::from_vec(n, 1, r1)?];
        let rg = self.rg(a_t) || self.rg(a_1);
        Ok(self.push(
            Op::CombineGraphs { a_t: a_t.id, a_1: a_1.id, lambda_, eta },
            value,
            rg,
            saved,
        ))
    }
}

/// Rows of `v` reweighted by `w_row` and L2-normalized with the guard; raw
/// norms are written into column `p` of `norms`.
fn weighted_normalize(v: &Dense, w_row: &[f64], p: usize, norms: &mut Dense) -> Dense {
    let mut out = Dense::zeros(v.rows(), v.cols());
    for i in 0..v.rows() {
        let row = out.row_mut(i);
        let mut sq = 0.0;
        for ((o, &x), &wq) in row.iter_mut().zip(v.row(i)).zip(w_row) {
            *o = x * wq;
            sq += *o * *o;
        }
        let norm = sq.sqrt();
        norms[(i, p)] = norm;
        let inv = 1.0 / (norm + RECIP_GUARD);
        for o in row.iter_mut() {
            *o *= inv;
        }
    }
    out
}

/// Backward rule for L2 row normalization with the guard: given the upstream
/// gradient on `xhat = t / (||t|| + e)`, rewrites it in place into the
/// gradient on `t`. With s = ||t|| and u = s + e the exact rule is
/// `dt = g/u - xhat * (g . xhat)/s`, degenerating to `g/e` at s = 0.
fn norm_chain_row(g_hat: &mut [f64], xhat: &[f64], norm: f64) {
    let u = norm + RECIP_GUARD;
    let dot: f64 = g_hat.iter().zip(xhat).map(|(&g, &x)| g * x).sum();
    let corr = if norm > 0.0 { dot / norm } else { 0.0 };
    for (g, &x) in g_hat.iter_mut().zip(xhat) {
        *g = *g / u - x * corr;
    }
}

impl Tape {
    /// Reverse sweep from a scalar loss. Leaf gradients are retained;
    /// intermediate gradients and values are freed as the sweep passes them,
    /// so only leaves remain readable afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(IdglError::BackwardTwice);
        }
        if loss.shape() != (1, 1) {
            return Err(IdglError::NonScalarLoss { rows: loss.rows, cols: loss.cols });
        }
        self.backward_done = true;
        if !self.nodes[loss.id].requires_grad {
            return Ok(());
        }
        self.nodes[loss.id].grad = Some(Dense::scalar(1.0));
        for i in (0..=loss.id).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let grad = if self.nodes[i].requires_grad {
                self.nodes[i].grad.take()
            } else {
                None
            };
            if let Some(g) = grad {
                let saved = std::mem::take(&mut self.nodes[i].saved);
                self.backprop_node(i, g, saved)?;
            }
            // The value of node i can no longer be needed: its consumers
            // (higher ids) have already run their backward rules.
            self.nodes[i].value = Dense::zeros(0, 0);
            self.nodes[i].saved = Vec::new();
        }
        Ok(())
    }

    fn accum(&mut self, parent: usize, mut contrib: Dense, from: OpKind) {
        if !self.nodes[parent].requires_grad {
            return;
        }
        if let Some((kind, factor)) = self.fault {
            if kind == from {
                contrib.scale_in_place(factor);
            }
        }
        match &mut self.nodes[parent].grad {
            Some(g) => g
                .add_scaled_in_place(&contrib, 1.0)
                .expect("gradient shape matches value shape"),
            slot @ None => *slot = Some(contrib),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&mut self, id: usize, g: Dense, saved: Vec<Dense>) -> Result<()> {
        // Ops are plain id/scalar data; copy what the rules need out of the
        // node so `self` stays free for value reads and grad writes.
        let kind = self.nodes[id].op.kind();
        match self.nodes[id].op {
            Op::Leaf => unreachable!("leaves are skipped in the sweep"),
            Op::Add { a, b } => {
                self.accum(a, g.clone(), kind);
                self.accum(b, g, kind);
            }
            Op::Sub { a, b } => {
                self.accum(a, g.clone(), kind);
                let mut neg = g;
                neg.scale_in_place(-1.0);
                self.accum(b, neg, kind);
            }
            Op::Scale { a, c } => {
                let mut da = g;
                da.scale_in_place(c);
                self.accum(a, da, kind);
            }
            Op::Hadamard { a, b } => {
                let da = g.zip_map(self.val(b), |gx, bx| gx * bx)?;
                let db = g.zip_map(self.val(a), |gx, ax| gx * ax)?;
                self.accum(a, da, kind);
                self.accum(b, db, kind);
            }
            Op::Square { a } => {
                let da = g.zip_map(self.val(a), |gx, ax| 2.0 * gx * ax)?;
                self.accum(a, da, kind);
            }
            Op::Relu { a } => {
                let da = g.zip_map(self.val(a), |gx, ax| if ax > 0.0 { gx } else { 0.0 })?;
                self.accum(a, da, kind);
            }
            Op::LogGuard { a, guard } => {
                let da = g.zip_map(self.val(a), |gx, ax| gx / (ax + guard))?;
                self.accum(a, da, kind);
            }
            Op::Sum { a } => {
                let (r, c) = self.val(a).shape();
                let da = Dense::full(r, c, g[(0, 0)]);
                self.accum(a, da, kind);
            }
            Op::Mean { a } => {
                let (r, c) = self.val(a).shape();
                let da = Dense::full(r, c, g[(0, 0)] / (r * c) as f64);
                self.accum(a, da, kind);
            }
            Op::FrobSq { a } => {
                let da = self.val(a).map(|x| 2.0 * g[(0, 0)] * x);
                self.accum(a, da, kind);
            }
            Op::MulConst { a, k } => {
                let da = g.zip_map(&self.consts[k.0], |gx, kx| gx * kx)?;
                self.accum(a, da, kind);
            }
            Op::MaskConst { a, mask } => {
                let da = self.masks[mask.0].apply(&g);
                self.accum(a, da, kind);
            }
            Op::Matmul { a, b } => {
                if self.nodes[a].requires_grad {
                    let da = kernels::matmul_nt(&g, self.val(b))?;
                    self.accum(a, da, kind);
                }
                if self.nodes[b].requires_grad {
                    let db = kernels::matmul_tn(self.val(a), &g)?;
                    self.accum(b, db, kind);
                }
            }
            Op::MatmulTn { a, b } => {
                if self.nodes[a].requires_grad {
                    let da = kernels::matmul_nt(self.val(b), &g)?;
                    self.accum(a, da, kind);
                }
                if self.nodes[b].requires_grad {
                    let db = kernels::matmul(self.val(a), &g)?;
                    self.accum(b, db, kind);
                }
            }
            Op::Spmm { s, b } => {
                let db = self.csrs[s.0].transpose().spmm(&g)?;
                self.accum(b, db, kind);
            }
            Op::AddSparseScaled { a, .. } => {
                self.accum(a, g, kind);
            }
            Op::RowNormalize { a } => {
                let sums = &saved[0];
                let y = &self.nodes[id].value;
                let mut da = g;
                for i in 0..y.rows() {
                    let s = sums[(i, 0)];
                    if s == 0.0 {
                        for gx in da.row_mut(i) {
                            *gx = 0.0;
                        }
                        continue;
                    }
                    let dot: f64 = da.row(i).iter().zip(y.row(i)).map(|(&gx, &yx)| gx * yx).sum();
                    for gx in da.row_mut(i) {
                        *gx = (*gx - dot) / s;
                    }
                }
                self.accum(a, da, kind);
            }
            Op::RowSums { a } => {
                let (r, c) = self.val(a).shape();
                let mut da = Dense::zeros(r, c);
                for i in 0..r {
                    let gi = g[(i, 0)];
                    for x in da.row_mut(i) {
                        *x = gi;
                    }
                }
                self.accum(a, da, kind);
            }
            Op::ColSums { a } => {
                let (r, c) = self.val(a).shape();
                let mut da = Dense::zeros(r, c);
                for i in 0..r {
                    for (j, x) in da.row_mut(i).iter_mut().enumerate() {
                        *x = g[(j, 0)];
                    }
                }
                self.accum(a, da, kind);
            }
            Op::Recip { a } => {
                let y = &self.nodes[id].value;
                let da = g.zip_map(y, |gx, yx| -gx * yx * yx)?;
                self.accum(a, da, kind);
            }
            Op::RowScale { a, v } => {
                if self.nodes[a].requires_grad {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        let s = self.nodes[v].value[(i, 0)];
                        for x in da.row_mut(i) {
                            *x *= s;
                        }
                    }
                    self.accum(a, da, kind);
                }
                if self.nodes[v].requires_grad {
                    let av = self.val(a);
                    let mut dv = Dense::zeros(av.rows(), 1);
                    for i in 0..av.rows() {
                        dv[(i, 0)] = g.row(i).iter().zip(av.row(i)).map(|(&gx, &ax)| gx * ax).sum();
                    }
                    self.accum(v, dv, kind);
                }
            }
            Op::GatherRows { a, idx } => {
                let (r, c) = self.val(a).shape();
                let mut da = Dense::zeros(r, c);
                for (pos, &i) in self.indices[idx.0].iter().enumerate() {
                    for (x, &gx) in da.row_mut(i).iter_mut().zip(g.row(pos)) {
                        *x += gx;
                    }
                }
                self.accum(a, da, kind);
            }
            Op::MeanPoolRows { a } => {
                let (r, c) = self.val(a).shape();
                let inv = 1.0 / r as f64;
                let mut da = Dense::zeros(r, c);
                for i in 0..r {
                    for (j, x) in da.row_mut(i).iter_mut().enumerate() {
                        *x = g[(0, j)] * inv;
                    }
                }
                self.accum(a, da, kind);
            }
            Op::Dropout { a, mask, keep } => {
                let mut da = self.masks[mask.0].apply(&g);
                da.scale_in_place(1.0 / keep);
                self.accum(a, da, kind);
            }
            Op::SoftmaxCrossEntropy { logits, labels, mask } => {
                let softmax = &saved[0];
                let (r, c) = self.val(logits).shape();
                let scale = g[(0, 0)] / self.indices[mask.0].len() as f64;
                let mut da = Dense::zeros(r, c);
                let mask_ids = &self.indices[mask.0];
                let label_ids = &self.indices[labels.0];
                for (pos, &i) in mask_ids.iter().enumerate() {
                    let y = label_ids[i];
                    for (j, (x, &p)) in da.row_mut(i).iter_mut().zip(softmax.row(pos)).enumerate() {
                        *x += scale * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
                self.accum(logits, da, kind);
            }
            Op::MultiheadCosine { v, w } => {
                let m = self.val(w).rows();
                let norms = &saved[m];
                let mut h = g.clone();
                let ht = g.transpose();
                h.add_scaled_in_place(&ht, 1.0)?;
                drop(ht);
                let (n, d) = self.val(v).shape();
                let mut dv = Dense::zeros(n, d);
                let mut dw = Dense::zeros(m, d);
                for p in 0..m {
                    let vhat = &saved[p];
                    let mut dvhat = kernels::matmul(&h, vhat)?;
                    dvhat.scale_in_place(1.0 / m as f64);
                    for i in 0..n {
                        norm_chain_row(dvhat.row_mut(i), vhat.row(i), norms[(i, p)]);
                        let (vi, wi) = (self.nodes[v].value.row(i), self.nodes[w].value.row(p));
                        let dt = dvhat.row(i);
                        for j in 0..d {
                            dv[(i, j)] += dt[j] * wi[j];
                            dw[(p, j)] += dt[j] * vi[j];
                        }
                    }
                }
                if self.nodes[v].requires_grad {
                    self.accum(v, dv, kind);
                }
                if self.nodes[w].requires_grad {
                    self.accum(w, dw, kind);
                }
            }
            Op::AnchorCosine { v, u, w } => {
                let m = self.val(w).rows();
                let vnorms = &saved[2 * m];
                let unorms = &saved[2 * m + 1];
                let (n, d) = self.val(v).shape();
                let s = self.val(u).rows();
                let mut dv = Dense::zeros(n, d);
                let mut du = Dense::zeros(s, d);
                let mut dw = Dense::zeros(m, d);
                let inv_m = 1.0 / m as f64;
                for p in 0..m {
                    let vhat = &saved[2 * p];
                    let uhat = &saved[2 * p + 1];
                    let mut dvhat = kernels::matmul(&g, uhat)?;
                    dvhat.scale_in_place(inv_m);
                    for i in 0..n {
                        norm_chain_row(dvhat.row_mut(i), vhat.row(i), vnorms[(i, p)]);
                        let (vi, wi) = (self.nodes[v].value.row(i), self.nodes[w].value.row(p));
                        let dt = dvhat.row(i);
                        for j in 0..d {
                            dv[(i, j)] += dt[j] * wi[j];
                            dw[(p, j)] += dt[j] * vi[j];
                        }
                    }
                    let mut duhat = kernels::matmul_tn(&g, vhat)?;
                    duhat.scale_in_place(inv_m);
                    for i2 in 0..s {
                        norm_chain_row(duhat.row_mut(i2), uhat.row(i2), unorms[(i2, p)]);
                        let (ui, wi) = (self.nodes[u].value.row(i2), self.nodes[w].value.row(p));
                        let dt = duhat.row(i2);
                        for j in 0..d {
                            du[(i2, j)] += dt[j] * wi[j];
                            dw[(p, j)] += dt[j] * ui[j];
                        }
                    }
                }
                if self.nodes[v].requires_grad {
                    self.accum(v, dv, kind);
                }
                if self.nodes[u].requires_grad {
                    self.accum(u, du, kind);
                }
                if self.nodes[w].requires_grad {
                    self.accum(w, dw, kind);
                }
            }
            Op::CombineGraphs { a_t, a_1, lambda_, eta } => {
                let c_t = (1.0 - lambda_) * eta;
                let c_1 = (1.0 - lambda_) * (1.0 - eta);
                for (parent, coeff, sums) in [(a_t, c_t, &saved[0]), (a_1, c_1, &saved[1])] {
                    if coeff == 0.0 || !self.nodes[parent].requires_grad {
                        continue;
                    }
                    let n = g.rows();
                    let mut da = Dense::zeros(n, n);
                    for i in 0..n {
                        let r = sums[(i, 0)];
                        if r == 0.0 {
                            continue;
                        }
                        let av = self.nodes[parent].value.row(i);
                        let gr = g.row(i);
                        let dot: f64 = gr.iter().zip(av).map(|(&gx, &ax)| gx * ax).sum();
                        let c_over_r = coeff / r;
                        let off = dot / r;
                        for (x, &gx) in da.row_mut(i).iter_mut().zip(gr) {
                            *x = c_over_r * (gx - off);
                        }
                    }
                    self.accum(parent, da, kind);
                }
            }
        }
        Ok(())
    }
}
